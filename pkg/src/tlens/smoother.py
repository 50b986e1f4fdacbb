"""Smoother decomposition ``f_tilde(x) = s(x) . y + c(x)`` of a squared-loss run.

Every optimizer step is written as ``delta_theta_t = gamma_t (U^S_t y + U^C_t)``
with a p x n matrix ``U^S_t`` and a p-vector ``U^C_t``. The per-step increments
of every tracked row are then ``gamma_t grad f(x) . U^S_t`` and
``gamma_t grad f(x) . U^C_t``.

With ``G^S_t = T_t (I - S_{t-1})`` and ``G^C_t = -T_t c'_{t-1}`` (so that the raw
gradient is ``-(G^S_t y + G^C_t)``):

* sgd:           ``U = G``
* momentum:      ``U~_t = b1 U~_{t-1} + (1 - b1) G_t``, ``U = U~_t / (1 - b1^t)``
* weight decay:  ``U = G - lam D_t``
* adamw:         ``U = diag(1/phi_t) U~_t / (1 - b1^t) - lam D_t``

where ``D_t`` decomposes ``theta_{t-1} = D^S_t y + D^C_t`` and advances as
``D_{t+1} = D_t + gamma_t U_t`` from ``D^S = 0``, ``D^C = theta_0``.

``c'`` is the offset fed back into the recursion. In ``"exact"`` mode it is
``f_{theta_{t-1}}(train) - S_{t-1} y``, which makes ``S y + c`` reproduce the
telescoping prediction exactly; ``"linearized"`` mode uses ``c_{t-1}`` itself,
i.e. it assumes the first-order model is exact at the training points. ``S`` is
the same in both modes.

Plain SGD never needs the p x n buffers: ``grad f(x) . T_t`` is a row of batch
kernel values, computed layer-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import ArchSpec, Linearization, ParamVector
from .optim import OptimConfig

DEFAULT_BUDGET = 200_000_000
OFFSET_MODES = ("exact", "linearized")


class SmootherBudgetError(MemoryError):
    pass


@dataclass
class SmootherState:
    S_train: np.ndarray
    c_train: np.ndarray
    S_test: np.ndarray
    c_test: np.ndarray
    t: int = 0
    U_S: np.ndarray | None = None
    U_C: np.ndarray | None = None
    D_S: np.ndarray | None = None
    D_C: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.S_train.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"S_train": self.S_train, "c_train": self.c_train, "S_test": self.S_test, "c_test": self.c_test}
        for name in ("U_S", "U_C", "D_S", "D_C"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, t: int) -> "SmootherState":
        return cls(
            arrays["S_train"].copy(),
            arrays["c_train"].copy(),
            arrays["S_test"].reshape(-1, arrays["S_train"].shape[0]).copy(),
            arrays["c_test"].copy(),
            t,
            *(arrays[k].copy() if k in arrays else None for k in ("U_S", "U_C", "D_S", "D_C")),
        )


def needs_buffers(cfg: OptimConfig) -> bool:
    return cfg.kind != "sgd"


def init_smoother(
    f0_train: np.ndarray,
    f0_test: np.ndarray,
    cfg: OptimConfig,
    theta0: ParamVector | np.ndarray | None = None,
    budget: int = DEFAULT_BUDGET,
) -> SmootherState:
    """Smoother at initialization: ``S = 0`` and ``c = f_{theta_0}``."""
    f0_train = np.asarray(f0_train, dtype=np.float64)
    f0_test = np.asarray(f0_test, dtype=np.float64)
    n, m = f0_train.size, f0_test.size
    state = SmootherState(np.zeros((n, n)), f0_train.copy(), np.zeros((m, n)), f0_test.copy())
    if needs_buffers(cfg):
        if theta0 is None:
            raise ValueError(f"{cfg.kind} smoothing needs theta_0")
        theta0 = np.asarray(getattr(theta0, "values", theta0), dtype=np.float64)
        p = theta0.size
        if p * n > budget:
            raise SmootherBudgetError(f"p*n = {p * n} exceeds the smoother budget {budget}")
        if cfg.uses_momentum:
            state.U_S = np.zeros((p, n))
            state.U_C = np.zeros(p)
        if cfg.decay > 0:
            state.D_S = np.zeros((p, n))
            state.D_C = theta0.copy()
    return state


def _offset(state, y, f_train_prev, offset_mode):
    if offset_mode == "exact":
        return np.asarray(f_train_prev, dtype=np.float64) - state.S_train @ y
    if offset_mode == "linearized":
        return state.c_train
    raise ValueError(f"unknown offset mode {offset_mode!r}")


def _apply(state: SmootherState, dS_train, dc_train, dS_test, dc_test):
    state.S_train += dS_train
    state.c_train += dc_train
    state.S_test += dS_test
    state.c_test += dc_test
    state.t += 1
    return state


def step_kernel(
    state: SmootherState,
    K_train_batch: np.ndarray,
    K_test_batch: np.ndarray,
    batch: np.ndarray,
    y: np.ndarray,
    f_train_prev: np.ndarray,
    gamma: float,
    offset_mode: str = "exact",
) -> SmootherState:
    """Plain-SGD step from raw kernel columns ``grad f(x) . grad f(x_j)``, j in the batch."""
    batch = np.asarray(batch, dtype=np.int64)
    if gamma == 0:
        state.t += 1
        return state
    y = np.asarray(y, dtype=np.float64)
    c_prime = _offset(state, y, f_train_prev, offset_mode)
    resid_S = -state.S_train[batch]
    resid_S[np.arange(batch.size), batch] += 1.0  # (I - S)[B, :]
    scale = gamma / batch.size
    dS_train = scale * (K_train_batch @ resid_S)
    dc_train = -scale * (K_train_batch @ c_prime[batch])
    dS_test = scale * (K_test_batch @ resid_S)
    dc_test = -scale * (K_test_batch @ c_prime[batch])
    return _apply(state, dS_train, dc_train, dS_test, dc_test)


def step_buffers(
    state: SmootherState,
    cfg: OptimConfig,
    T_columns: np.ndarray,
    batch: np.ndarray,
    J_train: np.ndarray,
    J_test: np.ndarray,
    y: np.ndarray,
    f_train_prev: np.ndarray,
    gamma: float,
    t: int,
    phi: np.ndarray | None = None,
    offset_mode: str = "exact",
) -> SmootherState:
    """General step using explicit ``T_t`` columns (p x b) and tracked Jacobians at theta_{t-1}."""
    batch = np.asarray(batch, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)
    c_prime = _offset(state, y, f_train_prev, offset_mode)
    resid_S = -state.S_train[batch]
    resid_S[np.arange(batch.size), batch] += 1.0
    G_S = T_columns @ resid_S
    G_C = -(T_columns @ c_prime[batch])

    if cfg.uses_momentum:
        b1 = cfg.beta1
        state.U_S = b1 * state.U_S + (1.0 - b1) * G_S
        state.U_C = b1 * state.U_C + (1.0 - b1) * G_C
        U_S = state.U_S / (1.0 - b1**t)
        U_C = state.U_C / (1.0 - b1**t)
        if cfg.kind == "adamw":
            if phi is None:
                raise ValueError("adamw smoothing needs the optimizer's scaling vector")
            inv = 1.0 / np.asarray(phi, dtype=np.float64)
            U_S = inv[:, None] * U_S
            U_C = inv * U_C
    else:
        U_S, U_C = G_S, G_C

    lam = cfg.decay
    if lam > 0:
        U_S = U_S - lam * state.D_S
        U_C = U_C - lam * state.D_C
        # theta_t = theta_{t-1} + gamma_t U_t
        state.D_S = state.D_S + gamma * U_S
        state.D_C = state.D_C + gamma * U_C

    if gamma == 0:
        state.t += 1
        return state
    return _apply(
        state,
        gamma * (J_train @ U_S),
        gamma * (J_train @ U_C),
        gamma * (J_test @ U_S),
        gamma * (J_test @ U_C),
    )


def smoother_step(
    state: SmootherState,
    cfg: OptimConfig,
    params_prev: ParamVector,
    spec: ArchSpec,
    x_train: np.ndarray,
    x_test: np.ndarray,
    batch,
    y: np.ndarray,
    f_train_prev: np.ndarray,
    gamma: float,
    t: int,
    phi: np.ndarray | None = None,
    offset_mode: str = "exact",
    lin: Linearization | None = None,
) -> SmootherState:
    """Advance the smoother by step ``t`` given the network at theta_{t-1}.

    Squared loss and a single output are assumed (the decomposition is only
    defined there); with a sigmoid head the post-activation gradients are used.
    ``lin`` may hold a linearization at theta_{t-1} of ``[x_train; x_test]``.
    """
    if spec.output_dim != 1:
        raise ValueError("smoothers are defined for single-output networks")
    batch = np.asarray(batch, dtype=np.int64)
    n, m = len(x_train), len(x_test)
    if lin is None:
        X_all = np.vstack([x_train, x_test]) if m else np.asarray(x_train, dtype=np.float64)
        lin = Linearization(params_prev, X_all, spec)
    train_rows, test_rows = np.arange(n), n + np.arange(m)
    if cfg.kind == "sgd":
        K = lin.kernel(None, batch)
        return step_kernel(state, K[:n], K[n:], batch, y, f_train_prev, gamma, offset_mode)
    J_train = lin.jacobian(train_rows)
    J_test = lin.jacobian(test_rows) if m else np.zeros((0, params_prev.size))
    T_cols = J_train[batch].T / batch.size
    return step_buffers(state, cfg, T_cols, batch, J_train, J_test, y, f_train_prev, gamma, t, phi, offset_mode)


def apply_smoother(state: SmootherState, y, row: int, split: str = "train") -> float:
    """``s(x) . y + c(x)`` for a tracked row."""
    S, c = (state.S_train, state.c_train) if split == "train" else (state.S_test, state.c_test)
    return float(S[row] @ np.asarray(y, dtype=np.float64) + c[row])


def smoother_predictions(state: SmootherState, y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    return state.S_train @ y + state.c_train, state.S_test @ y + state.c_test


def effective_params(rows, n: int) -> float:
    """``n / |I_0| * sum_j ||s(x_j)||^2`` over the given smoother rows."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0 or rows.size == 0:
        raise ValueError("effective parameters need at least one smoother row")
    if rows.shape[1] != n:
        raise ValueError(f"rows have length {rows.shape[1]}, expected {n}")
    return float(n / rows.shape[0] * np.einsum("ij,ij->", rows, rows))


def invariant_gap(state: SmootherState, y, f_tilde_train, f_tilde_test) -> float:
    """max |S y + c - f_tilde| over all tracked rows."""
    tr, te = smoother_predictions(state, y)
    gap = np.max(np.abs(tr - f_tilde_train)) if tr.size else 0.0
    if te.size:
        gap = max(gap, np.max(np.abs(te - f_tilde_test)))
    return float(gap)
