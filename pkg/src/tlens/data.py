"""Dataset loading, preprocessing, corruption and synthetic task generators."""

from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "TLENS_DATA_DIR"


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x_train", "y_train", "x_test", "y_test"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains NaN or Inf")
            setattr(self, name, arr)

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    def replace(self, **kw) -> "Dataset":
        fields = dict(
            x_train=self.x_train, y_train=self.y_train, x_test=self.x_test, y_test=self.y_test,
            manifest=dict(self.manifest),
        )
        fields.update(kw)
        return Dataset(**fields)

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True)


# -- IDX -------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read an IDX image (0x803, returns uint8 n x h x w) or label (0x801, returns uint8 n) file."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IMAGE_MAGIC:
        if len(data) < 16:
            raise ValueError(f"{path}: truncated header")
        n, h, w = struct.unpack(">III", data[4:16])
        shape, offset = (n, h, w), 16
    elif magic == LABEL_MAGIC:
        (n,) = struct.unpack(">I", data[4:8])
        shape, offset = (n,), 8
    else:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}")
    count = int(np.prod(shape))
    if len(data) - offset < count:
        raise ValueError(f"{path}: payload has {len(data) - offset} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).reshape(shape).copy()


def write_idx(path, array) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        if arr.ndim == 3:
            fh.write(struct.pack(">IIII", IMAGE_MAGIC, *arr.shape))
        elif arr.ndim == 1:
            fh.write(struct.pack(">II", LABEL_MAGIC, arr.shape[0]))
        else:
            raise ValueError("IDX writer supports image stacks (3-D) and label vectors (1-D)")
        fh.write(arr.tobytes())


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = load_idx(images_path), load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise ValueError("expected an image file and a label file")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


_MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def _find(root: Path, stem: str):
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    return None


def load_mnist(data_dir=None) -> tuple[np.ndarray, np.ndarray, str]:
    """MNIST images (n x 28 x 28 uint8) and labels.

    IDX files under ``data_dir`` (or ``$TLENS_DATA_DIR``) take precedence; otherwise
    the 5000-image subset bundled with mlxtend is used.
    """
    root = data_dir or os.environ.get(DATA_DIR_ENV)
    if root:
        root = Path(root)
        img, lab = (_find(root, s) for s in _MNIST_FILES)
        if img is not None and lab is not None:
            images, labels = load_idx_pair(img, lab)
            return images, labels, f"idx:{root}"
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise FileNotFoundError(
            f"no MNIST IDX files found (set {DATA_DIR_ENV}) and mlxtend is not installed"
        ) from exc
    X, y = mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8), "mlxtend:mnist_5k"


# -- image tasks -------------------------------------------------------------


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging matrix mapping length n_in to n_out (exact block means when n_out divides n_in)."""
    P = np.zeros((n_out, n_in))
    edges = np.linspace(0.0, n_in, n_out + 1)
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            P[i, j] = min(hi, j + 1) - max(lo, j)
        P[i] /= hi - lo
    return P


def downsample(images, size: tuple[int, int]) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    Ph = _pool_matrix(images.shape[1], size[0])
    Pw = _pool_matrix(images.shape[2], size[1])
    out = np.einsum("ih,nhw,jw->nij", Ph, images, Pw)
    return out[0] if single else out


def make_binary_task(
    images,
    labels,
    class_a: int,
    class_b: int,
    n_train: int,
    n_test: int,
    downsample_to: tuple[int, int] = (8, 8),
    seed: int = 0,
    scale: float = 255.0,
) -> Dataset:
    """Two-class task (class_a -> 0, class_b -> 1), pooled, flattened and scaled to [0, 1].

    Train and test rows are drawn without overlap; each split alternates
    classes as far as availability allows.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    idx_a = rng.permutation(np.flatnonzero(labels == class_a))
    idx_b = rng.permutation(np.flatnonzero(labels == class_b))
    if len(idx_a) == 0 or len(idx_b) == 0:
        raise ValueError(f"classes {class_a} and {class_b} must both be present")
    if len(idx_a) + len(idx_b) < n_train + n_test:
        raise ValueError(f"only {len(idx_a) + len(idx_b)} examples for {n_train + n_test} requested")

    def take(k, start_a, start_b):
        ka = min(k - k // 2, len(idx_a) - start_a)
        kb = k - ka
        if kb > len(idx_b) - start_b:
            kb = len(idx_b) - start_b
            ka = k - kb
        return idx_a[start_a : start_a + ka], idx_b[start_b : start_b + kb]

    tr_a, tr_b = take(n_train, 0, 0)
    te_a, te_b = take(n_test, len(tr_a), len(tr_b))

    def build(ia, ib):
        order = rng.permutation(len(ia) + len(ib))
        idx = np.concatenate([ia, ib])[order]
        y = np.concatenate([np.zeros(len(ia)), np.ones(len(ib))])[order]
        x = downsample(np.asarray(images)[idx], downsample_to).reshape(len(idx), -1) / scale
        return x, y

    x_tr, y_tr = build(tr_a, tr_b)
    x_te, y_te = build(te_a, te_b)
    manifest = dict(
        task="binary_image", classes=[int(class_a), int(class_b)], n_train=int(n_train), n_test=int(n_test),
        downsample=list(downsample_to), seed=int(seed),
    )
    return Dataset(x_tr, y_tr, x_te, y_te, manifest)


def mnist_binary_task(class_a=3, class_b=5, n_train=1000, n_test=1000, downsample_to=(8, 8), seed=0, data_dir=None):
    """MNIST two-class task; with only the bundled subset available the split is shrunk to fit."""
    images, labels, source = load_mnist(data_dir)
    available = int(np.sum(labels == class_a) + np.sum(labels == class_b))
    if n_train + n_test > available:
        n_test = max(available - n_train, 0)
        if n_test < available // 5:
            n_train = available - available // 5
            n_test = available // 5
    ds = make_binary_task(images, labels, class_a, class_b, n_train, n_test, downsample_to, seed)
    ds.manifest["source"] = source
    return ds


# -- corruption and synthetic tasks -----------------------------------------


def add_label_noise(ds: Dataset, rate: float, seed: int = 0) -> Dataset:
    """Flip exactly floor(rate * n) uniformly chosen binary training labels."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    n = ds.n_train
    k = int(np.floor(rate * n + 1e-9))
    flip = np.random.default_rng(seed).choice(n, size=k, replace=False)
    y = ds.y_train.copy()
    y[flip] = 1.0 - y[flip]
    out = ds.replace(y_train=y)
    out.manifest["label_noise"] = {"rate": float(rate), "flipped": k, "seed": int(seed)}
    return out


def polynomial_target(x, beta) -> np.ndarray:
    return 0.5 * (np.asarray(x) @ np.asarray(beta)) ** 2


def polynomial_task(d: int = 100, n_train: int = 550, n_test: int = 500, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """Inputs ~ N(0, I/d), targets 0.5 (beta . x)^2 with a unit-norm beta."""
    if d < 1:
        raise ValueError("d must be positive")
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=d)
    beta /= np.linalg.norm(beta)
    x = rng.normal(scale=1.0 / np.sqrt(d), size=(n_train + n_test, d))
    y = polynomial_target(x, beta)
    ds = Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                 dict(task="polynomial", d=d, n_train=n_train, n_test=n_test, seed=int(seed)))
    return ds, beta


def _mnist1d_templates() -> np.ndarray:
    # coarse 1-D strokes for digit 0 and digit 1
    zero = np.array([5, 6, 6, 5, 3, 1, 0, 0, 1, 3, 5, 6], dtype=np.float64)
    one = np.array([0, 0, 1, 3, 6, 6, 6, 6, 3, 1, 0, 0], dtype=np.float64)
    return np.stack([zero, one]) / 6.0


def mnist1d_task(
    n_train: int = 1000,
    n_test: int = 1000,
    length: int = 40,
    noise: float = 0.25,
    corr_noise: float = 0.25,
    seed: int = 0,
) -> Dataset:
    """Synthetic 0-vs-1 sequences: a template that is stretched, shifted, sheared and noised.

    Mirrors the shape of the MNIST-1D transformations at small scale.
    """
    rng = np.random.default_rng(seed)
    templates = _mnist1d_templates()
    n = n_train + n_test
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    grid = np.linspace(0.0, 1.0, length)
    x = np.empty((n, length))
    base = np.linspace(0.0, 1.0, templates.shape[1])
    for i in range(n):
        scale = rng.uniform(0.4, 0.7)
        shift = rng.uniform(0.0, 1.0 - scale)
        pos = (grid - shift) / scale
        sig = np.interp(pos, base, templates[labels[i]], left=0.0, right=0.0)
        sig += rng.uniform(-0.5, 0.5) * (grid - 0.5)  # shear
        walk = np.cumsum(rng.normal(size=length))
        walk = (walk - walk.mean()) / (walk.std() + 1e-12)
        x[i] = sig + noise * rng.normal(size=length) + corr_noise * walk * 0.3
    y = labels.astype(np.float64)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                   dict(task="mnist1d_synthetic", length=length, n_train=n_train, n_test=n_test, seed=int(seed)))


def heavy_tailed_regression(n: int = 12000, d: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Skewed, heavy-tailed features with a mostly axis-aligned step target.

    The target is a sum of per-feature thresholds at the feature medians, one
    pairwise interaction and a small smooth term. It is flat in the tails, so
    trees extrapolate it well while smooth networks keep extrapolating a local
    slope; tail points are therefore informative for the irregularity study.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_t(df=3, size=(n, d))
    z[:, : d // 2] = np.exp(0.8 * rng.normal(size=(n, d // 2)))  # lognormal block
    mix = rng.normal(size=(d, d)) / np.sqrt(d)
    x = z + 0.3 * z @ mix
    med = np.median(x, axis=0)
    s = x @ (rng.normal(size=d) / np.sqrt(d))
    signs = np.where(np.arange(d) % 2 == 1, 1.0, -0.7)
    y = (((x > med) * signs).sum(axis=1) + 0.8 * (x[:, 0] > med[0]) * (x[:, 1] > med[1])
         + 0.5 * np.tanh(s) + 0.1 * rng.normal(size=n))
    return x, y


# -- tabular helpers ---------------------------------------------------------


def standardize(x, mean=None, std=None):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0) if mean is None else mean
    std = x.std(axis=0) if std is None else std
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def pca_irregularity_rank(inputs) -> np.ndarray:
    """Indices ordered from most to least irregular: |PC1 score - median| descending, ties by index."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("need at least two rows")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(1.0, np.abs(x).max() ** 2):
        raise ValueError("data has zero variance; no principal direction")
    scores = xc @ evecs[:, -1]
    dev = np.abs(scores - np.median(scores))
    return np.lexsort((np.arange(len(dev)), -dev))


def split_irregular(inputs, fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """(regular indices, irregular indices) with the top ``fraction`` of the ranking irregular."""
    order = pca_irregularity_rank(inputs)
    k = int(np.floor(fraction * len(order)))
    return np.sort(order[k:]), np.sort(order[:k])


def build_mixture_testset(regular_pool, irregular_pool, p: float, size: int, seed: int = 0) -> np.ndarray:
    """Index array: floor(p*size) rows from the irregular pool, the rest from the regular pool.

    Returned indices refer to the concatenation ``[regular_pool, irregular_pool]``
    as given (positions, not original ids), irregular rows first.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    k_irr = int(np.floor(p * size + 1e-9))
    k_reg = size - k_irr
    regular_pool, irregular_pool = np.asarray(regular_pool), np.asarray(irregular_pool)
    if k_irr > len(irregular_pool) or k_reg > len(regular_pool):
        raise ValueError(
            f"pools of {len(regular_pool)} regular / {len(irregular_pool)} irregular rows cannot supply "
            f"{k_reg} / {k_irr}"
        )
    rng = np.random.default_rng(seed)
    irr = irregular_pool[rng.choice(len(irregular_pool), size=k_irr, replace=False)]
    reg = regular_pool[rng.choice(len(regular_pool), size=k_reg, replace=False)]
    return np.concatenate([irr, reg])


def _apply_transform(col: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return col
    if kind == "log":
        if np.any(col <= 0):
            raise ValueError("log transform needs positive values")
        return np.log(col)
    if kind == "log1p":
        if np.any(col <= -1):
            raise ValueError("log1p transform needs values > -1")
        return np.log1p(col)
    raise ValueError(f"unknown transform {kind!r}")


def load_csv_tabular(path, target: str, transforms: dict | None = None, standardize_features: bool = True,
                     rescale_target: bool = True) -> tuple[np.ndarray, np.ndarray, dict]:
    """Numeric CSV with a header row -> (features, target, manifest).

    ``transforms`` maps column names (target included) to ``identity``, ``log``
    or ``log1p``; features are then standardized and the target standardized.
    """
    transforms = dict(transforms or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if target not in header:
        raise ValueError(f"target column {target!r} not in header")
    try:
        table = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"non-numeric cell in {path}: {exc}") from exc
    unknown = set(transforms) - set(header)
    if unknown:
        raise ValueError(f"transforms for unknown columns {sorted(unknown)}")
    for j, name in enumerate(header):
        table[:, j] = _apply_transform(table[:, j], transforms.get(name, "identity"))
    t = header.index(target)
    y = table[:, t]
    x = np.delete(table, t, axis=1)
    manifest = {"source": str(path), "target": target, "transforms": transforms, "rows": len(y)}
    if standardize_features:
        x, mean, std = standardize(x)
        manifest["feature_mean"] = mean.tolist()
        manifest["feature_std"] = std.tolist()
    if rescale_target:
        y_mean, y_std = float(y.mean()), float(y.std()) or 1.0
        y = (y - y_mean) / y_std
        manifest["target_mean"], manifest["target_std"] = y_mean, y_std
    return x, y, manifest
