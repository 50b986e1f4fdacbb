"""Gradient-boosted regression trees with explicit tree kernels.

Each stage fits a tree to the negative squared-loss gradients ``y - f``. A tree
predicts the mean of its leaf's targets, so it is a smoother: the weight of
training point ``i`` at query ``x`` is ``1{leaf(x) = leaf(x_i)} / n_leaf(x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature[k] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray
    leaf_counts: np.ndarray
    train_leaf: np.ndarray

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_counts)

    def apply(self, X) -> np.ndarray:
        """Leaf id for every row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            k = node[idx]
            go_left = X[idx, self.feature[k]] <= self.threshold[k]
            node[idx] = np.where(go_left, self.left[k], self.right[k])
            active = self.feature[node] >= 0
        return self.leaf_id[node]

    def predict(self, X) -> np.ndarray:
        leaves = self.apply(X)
        leaf_value = np.empty(self.n_leaves)
        leaf_value[self.leaf_id[self.feature < 0]] = self.value[self.feature < 0]
        return leaf_value[leaves]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "leaf_id": self.leaf_id.tolist(),
            "leaf_counts": self.leaf_counts.tolist(),
            "train_leaf": self.train_leaf.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        ints = ("feature", "left", "right", "leaf_id", "leaf_counts", "train_leaf")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else np.float64) for k, v in d.items()})


def _best_split(X: np.ndarray, r: np.ndarray):
    """Exact greedy SSE reduction; first strict improvement wins (lowest feature, then lowest threshold)."""
    n, d = X.shape
    total = r.sum()
    best = (0.0, -1, 0.0)
    parent = total * total / n
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], r[order]
        csum = np.cumsum(rs)[:-1]
        k = np.arange(1, n)
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        # SSE reduction = sum_L^2/n_L + sum_R^2/n_R - sum^2/n
        gain = csum**2 / k + (total - csum) ** 2 / (n - k) - parent
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))  # argmax returns the lowest threshold among ties
        if gain[pos] > best[0] + 1e-12 * max(1.0, abs(parent)):
            best = (float(gain[pos]), j, 0.5 * (xs[pos] + xs[pos + 1]))
    return best


def fit_tree(X, r, max_depth: int) -> Tree:
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    feature, threshold, left, right, value, leaf_id = [], [], [], [], [], []
    counts = []
    train_leaf = np.empty(len(r), dtype=np.int64)

    def grow(rows, depth):
        node = len(feature)
        for lst in (feature, threshold, left, right, value, leaf_id):
            lst.append(0)
        gain, j, thr = _best_split(X[rows], r[rows]) if depth < max_depth and rows.size > 1 else (0.0, -1, 0.0)
        if j < 0:
            feature[node], threshold[node], left[node], right[node] = -1, 0.0, -1, -1
            value[node] = float(r[rows].mean())
            leaf_id[node] = len(counts)
            train_leaf[rows] = len(counts)
            counts.append(rows.size)
            return node
        mask = X[rows, j] <= thr
        feature[node], threshold[node], leaf_id[node], value[node] = j, thr, -1, 0.0
        left[node] = grow(rows[mask], depth + 1)
        right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(np.arange(len(r)), 0)
    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
        np.asarray(leaf_id, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
        train_leaf,
    )


@dataclass
class TreeEnsemble:
    h0: float
    gamma: float
    max_depth: int
    stages: list = field(default_factory=list)
    grads: list = field(default_factory=list)  # per-stage g_it = f_{t-1}(x_i) - y_i

    @property
    def n_train(self) -> int:
        return len(self.grads[0]) if self.grads else 0

    def predict(self, X, n_stages: int | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.h0)
        for tree in self.stages[:n_stages]:
            out += self.gamma * tree.predict(X)
        return out

    def predict_kernel_form(self, X) -> np.ndarray:
        """h0 - gamma sum_t sum_i K_t(x, x_i) g_it."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.h0)
        for t in range(len(self.stages)):
            K = tree_kernel_matrix(self, t, X)
            out -= self.gamma * (K @ self.grads[t])
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "h0": self.h0,
                "gamma": self.gamma,
                "max_depth": self.max_depth,
                "stages": [t.to_dict() for t in self.stages],
                "grads": [g.tolist() for g in self.grads],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        d = json.loads(text)
        return cls(
            d["h0"], d["gamma"], d["max_depth"],
            [Tree.from_dict(s) for s in d["stages"]],
            [np.asarray(g, dtype=np.float64) for g in d["grads"]],
        )


def fit_gbt(X, y, gamma: float = 0.1, n_stages: int = 200, max_depth: int = 3, h0: float | None = None) -> TreeEnsemble:
    """Boost ``n_stages`` trees on squared loss; ``h0`` defaults to mean(y)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(y) < 2:
        raise ValueError("need at least two training points")
    if n_stages < 1:
        raise ValueError("need at least one stage")
    ens = TreeEnsemble(float(y.mean()) if h0 is None else float(h0), float(gamma), int(max_depth))
    f = np.full(len(y), ens.h0)
    for _ in range(n_stages):
        g = f - y
        tree = fit_tree(X, -g, max_depth)
        ens.stages.append(tree)
        ens.grads.append(g)
        f = f + ens.gamma * tree.predict(X)
    return ens


@dataclass
class KernelRowTree:
    """Sparse tree-kernel row: weight ``1/n_leaf`` on each member of one leaf."""

    n: int
    leaf: int
    members: np.ndarray

    @property
    def weight(self) -> float:
        return 1.0 / len(self.members)

    def dense(self) -> np.ndarray:
        row = np.zeros(self.n)
        row[self.members] = self.weight
        return row

    def norm(self) -> float:
        return 1.0 / np.sqrt(len(self.members))


def tree_kernel_row(ens: TreeEnsemble, stage: int, x) -> KernelRowTree:
    tree = ens.stages[stage]
    leaf = int(tree.apply(np.atleast_2d(x))[0])
    return KernelRowTree(len(tree.train_leaf), leaf, np.flatnonzero(tree.train_leaf == leaf))


def tree_kernel_matrix(ens: TreeEnsemble, stage: int, X) -> np.ndarray:
    tree = ens.stages[stage]
    leaves = tree.apply(X)
    K = (leaves[:, None] == tree.train_leaf[None, :]).astype(np.float64)
    return K / tree.leaf_counts[leaves][:, None]


def tree_kernel_norms(ens: TreeEnsemble, X) -> np.ndarray:
    """(stages, rows) array of tree-kernel row norms ``1/sqrt(n_leaf(x))``."""
    return np.stack([1.0 / np.sqrt(t.leaf_counts[t.apply(X)]) for t in ens.stages])


def kernel_norm_ratio(test_norms, train_norms) -> float:
    """mean_t max_j ||k_t(x_j)|| over test rows divided by the same over training rows.

    Both arguments are (steps, rows) arrays of kernel-row norms.
    """
    test_norms = np.atleast_2d(np.asarray(test_norms, dtype=np.float64))
    train_norms = np.atleast_2d(np.asarray(train_norms, dtype=np.float64))
    if test_norms.size == 0 or train_norms.size == 0:
        raise ValueError("empty index set")
    den = train_norms.max(axis=1).mean()
    if den == 0:
        raise ValueError("training kernel rows are all zero")
    return float(test_norms.max(axis=1).mean() / den)


def relative_mse(mse_nn: float, mse_gbt: float, mse_nn_0: float, mse_gbt_0: float) -> float:
    """(MSE_NN^p - MSE_GBT^p) / (MSE_NN^0 - MSE_GBT^0)."""
    den = mse_nn_0 - mse_gbt_0
    if den == 0:
        raise ZeroDivisionError("baseline MSEs are equal; relative MSE is undefined")
    return float((mse_nn - mse_gbt) / den)
