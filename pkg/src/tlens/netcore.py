"""Dense network engine: layout, deterministic init, forward, exact per-example gradients.

Everything is float64. Weights are stored as ``(out, in)`` matrices, so a layer
computes ``h = a @ W.T + b``. All gradient routines differentiate the scalar
network output; for a sigmoid head they can return either the pre-activation
gradient ``d g / d theta`` or the post-activation one ``sigma'(g) * d g / d theta``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "quadratic")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")
LOSSES = ("squared", "bce")
BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class ArchSpec:
    """Architecture of a fully-connected, single-head network.

    ``hidden_activation="quadratic"`` is the custom nonlinearity
    ``phi(h) = h + epsilon / 2 * h**2``; it needs a frozen output layer, which is
    then a fixed mean read-out (weights ``1 / width``, no bias).
    An empty ``hidden_dims`` gives a single affine map.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    output_dim: int = 1
    hidden_activation: str = "relu"
    epsilon: float = 0.0
    output_activation: str = "identity"
    final_layer_trainable: bool = True
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"layer dimensions must be positive, got {dims}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation == "quadratic" and self.final_layer_trainable:
            raise ValueError("quadratic networks require final_layer_trainable=False")
        if not self.hidden_dims and not self.final_layer_trainable:
            raise ValueError("a pure linear map must have a trainable layer")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def trainable(self, layer: int) -> bool:
        return layer < self.n_layers - 1 or self.final_layer_trainable

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["hidden_dims"] = tuple(d.get("hidden_dims", ()))
        return cls(**d)


@dataclass(frozen=True)
class LayerSlot:
    name: str
    layer: int
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def make_layout(spec: ArchSpec) -> tuple[LayerSlot, ...]:
    slots = []
    offset = 0
    dims = spec.dims
    for l in range(spec.n_layers):
        if not spec.trainable(l):
            continue
        shapes = [(f"W{l}", (dims[l + 1], dims[l]))]
        if spec.bias:
            shapes.append((f"b{l}", (dims[l + 1],)))
        for name, shape in shapes:
            slot = LayerSlot(name, l, shape, offset)
            slots.append(slot)
            offset += slot.size
    return tuple(slots)


def n_params(spec: ArchSpec) -> int:
    layout = make_layout(spec)
    return layout[-1].offset + layout[-1].size


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the record of where each layer lives."""

    values: np.ndarray
    layout: tuple[LayerSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        end = 0
        for slot in self.layout:
            if slot.offset != end:
                raise ValueError("layout offsets do not partition the vector")
            end += slot.size
        if end != self.values.shape[0] or self.values.ndim != 1:
            raise ValueError(f"layout covers {end} entries, vector has {self.values.shape}")

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def unflatten(self) -> dict[str, np.ndarray]:
        """Views into ``values`` keyed by slot name (no copies)."""
        return {
            s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape)
            for s in self.layout
        }

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout) -> "ParamVector":
        values = np.concatenate([np.asarray(arrays[s.name], dtype=np.float64).ravel() for s in layout])
        return cls(values, tuple(layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def layer_slices(self) -> dict[int, slice]:
        """Contiguous index range of every trainable layer (weights and bias together)."""
        out: dict[int, list[int]] = {}
        for s in self.layout:
            lo, hi = out.get(s.layer, [s.offset, s.offset])
            out[s.layer] = [min(lo, s.offset), max(hi, s.offset + s.size)]
        return {l: slice(lo, hi) for l, (lo, hi) in out.items()}


@dataclass
class GradMatrix:
    """Columns ``batch_scale * grad f(x_i)`` for the examples of one batch."""

    columns: np.ndarray
    indices: np.ndarray
    batch_scale: float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("batch indices must be distinct")
        if self.columns.shape[1] != len(self.indices):
            raise ValueError("one column per batch index expected")

    def matvec(self, per_example: np.ndarray) -> np.ndarray:
        """``T g`` for a length-b vector of loss gradients aligned with ``indices``."""
        return self.columns @ np.asarray(per_example, dtype=np.float64)


# ---------------------------------------------------------------------------
# initialization


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def build_network(spec: ArchSpec, seed: int, init_scale: float = 1.0) -> ParamVector:
    """Draw initial parameters, then multiply everything by ``init_scale``.

    ReLU networks use He-uniform weights (bound ``sqrt(6 / fan_in)``; the output
    layer uses ``sqrt(3 / fan_in)``) and zero biases. Quadratic networks use
    standard normal weights, as in the polynomial-regression protocol.
    """
    if not init_scale > 0:
        raise ValueError("init_scale must be positive")
    rng = _rng(seed)
    layout = make_layout(spec)
    arrays = {}
    last = spec.n_layers - 1
    for slot in layout:
        if slot.name.startswith("b"):
            arrays[slot.name] = np.zeros(slot.shape)
            continue
        fan_in = slot.shape[1]
        if spec.hidden_activation == "quadratic":
            w = rng.standard_normal(slot.shape)
        else:
            bound = np.sqrt((3.0 if slot.layer == last else 6.0) / fan_in)
            w = rng.uniform(-bound, bound, size=slot.shape)
        arrays[slot.name] = w
    params = ParamVector.flatten(arrays, layout)
    params.values *= init_scale
    return params


# ---------------------------------------------------------------------------
# forward / backward


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _act(h, spec):
    if spec.hidden_activation == "relu":
        return np.maximum(h, 0.0)
    return h + 0.5 * spec.epsilon * h * h


def _act_deriv(h, spec):
    if spec.hidden_activation == "relu":
        return (h > 0).astype(np.float64)
    return 1.0 + spec.epsilon * h


def _layer_weights(arrays, spec, l):
    """(W, b) of layer ``l``; a frozen head is the fixed mean read-out."""
    if spec.trainable(l):
        return arrays[f"W{l}"], arrays.get(f"b{l}")
    fan_in = spec.dims[l]
    return np.full((spec.dims[l + 1], fan_in), 1.0 / fan_in), None


def _as_batch(X, spec) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of dimension {spec.input_dim}, got {X.shape[1]}")
    return X


def forward(params: ParamVector, X, spec: ArchSpec):
    """Pre-activation output ``g`` (N,) plus per-layer (input activation, pre-activation) cache."""
    X = _as_batch(X, spec)
    arrays = params.unflatten()
    a = X
    cache = []
    for l in range(spec.n_layers):
        W, b = _layer_weights(arrays, spec, l)
        h = a @ W.T
        if b is not None:
            h = h + b
        cache.append((a, h))
        a = _act(h, spec) if l < spec.n_layers - 1 else h
    return a[:, 0] if spec.output_dim == 1 else a, cache


def predict_batch(params: ParamVector, X, spec: ArchSpec, preactivation: bool = False) -> np.ndarray:
    g, _ = forward(params, X, spec)
    if spec.output_activation == "sigmoid" and not preactivation:
        return sigmoid(g)
    return g


def predict(params: ParamVector, x, spec: ArchSpec, preactivation: bool = False) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes a single input vector")
    return float(predict_batch(params, x, spec, preactivation)[0])


def _head_scale(g, spec, preactivation):
    if spec.output_activation == "sigmoid" and not preactivation:
        s = sigmoid(g)
        return s * (1.0 - s)
    return np.ones_like(g)


def backprop_deltas(params: ParamVector, X, spec: ArchSpec, preactivation: bool = False):
    """Per-example output sensitivities of every layer's pre-activation.

    Returns ``(g, [(a_in, delta)] per layer)`` with ``delta[l]`` of shape (N, out_l),
    so that the gradient of layer ``l``'s weights for example ``i`` is
    ``outer(delta[l][i], a_in[l][i])``.
    """
    if spec.output_dim != 1:
        raise ValueError("gradients are defined for single-output networks")
    g, cache = forward(params, X, spec)
    arrays = params.unflatten()
    delta = _head_scale(g, spec, preactivation)[:, None]
    out = [None] * spec.n_layers
    for l in range(spec.n_layers - 1, -1, -1):
        a_in, _ = cache[l]
        out[l] = (a_in, delta)
        if l > 0:
            W, _ = _layer_weights(arrays, spec, l)
            delta = (delta @ W) * _act_deriv(cache[l - 1][1], spec)
    return g, out


def jacobian(params: ParamVector, X, spec: ArchSpec, preactivation: bool = False) -> np.ndarray:
    """Per-example gradients of the output, shape (N, p)."""
    X = _as_batch(X, spec)
    _, layers = backprop_deltas(params, X, spec, preactivation)
    J = np.empty((X.shape[0], params.size))
    for slot in params.layout:
        a_in, delta = layers[slot.layer]
        cols = slice(slot.offset, slot.offset + slot.size)
        if slot.name.startswith("W"):
            J[:, cols] = (delta[:, :, None] * a_in[:, None, :]).reshape(X.shape[0], -1)
        else:
            J[:, cols] = delta
    return J


def predict_grad(params: ParamVector, x, spec: ArchSpec, preactivation: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_grad takes a single input vector")
    return jacobian(params, x, spec, preactivation)[0]


def vjp(params: ParamVector, X, weights, spec: ArchSpec, preactivation: bool = False):
    """``(f(X), sum_i weights[i] * grad f(x_i))`` by one weighted backward pass."""
    X = _as_batch(X, spec)
    g, layers = backprop_deltas(params, X, spec, preactivation)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    out = np.empty(params.size)
    for slot in params.layout:
        a_in, delta = layers[slot.layer]
        cols = slice(slot.offset, slot.offset + slot.size)
        out[cols] = ((delta * w).T @ a_in).ravel() if slot.name.startswith("W") else (delta * w).sum(axis=0)
    if spec.output_activation == "sigmoid" and not preactivation:
        g = sigmoid(g)
    return g, out


def jvp(params: ParamVector, X, tangent: np.ndarray, spec: ArchSpec, preactivation: bool = False):
    """Forward-mode directional derivative: ``(f(X), J(X) @ tangent)`` without forming J."""
    X = _as_batch(X, spec)
    arrays = params.unflatten()
    t_arrays = ParamVector(np.asarray(tangent, dtype=np.float64), params.layout).unflatten()
    a, da = X, np.zeros_like(X)
    for l in range(spec.n_layers):
        W, b = _layer_weights(arrays, spec, l)
        h = a @ W.T
        dh = da @ W.T
        if spec.trainable(l):
            dh = dh + a @ t_arrays[f"W{l}"].T
            if b is not None:
                h = h + b
                dh = dh + t_arrays[f"b{l}"]
        if l < spec.n_layers - 1:
            a, da = _act(h, spec), _act_deriv(h, spec) * dh
        else:
            a, da = h, dh
    g, dg = a[:, 0], da[:, 0]
    if spec.output_activation == "sigmoid" and not preactivation:
        s = sigmoid(g)
        return s, s * (1.0 - s) * dg
    return g, dg


def kernel_matrix(
    params: ParamVector,
    X1,
    X2,
    spec: ArchSpec,
    preactivation: bool = False,
) -> np.ndarray:
    """Raw tangent kernel ``J(X1) @ J(X2).T`` assembled layer by layer.

    Uses ``<outer(d, a), outer(d', a')> = (d.d') (a.a')`` so p-length gradients are
    never materialized.
    """
    _, L1 = backprop_deltas(params, X1, spec, preactivation)
    _, L2 = backprop_deltas(params, X2, spec, preactivation)
    K = None
    for l in range(spec.n_layers):
        if not spec.trainable(l):
            continue
        a1, d1 = L1[l]
        a2, d2 = L2[l]
        inner = a1 @ a2.T
        if spec.bias:
            inner += 1.0
        term = (d1 @ d2.T) * inner
        K = term if K is None else K + term
    return K


class Linearization:
    """One forward/backward pass over a fixed input set at fixed parameters.

    Outputs, VJPs, JVPs, Jacobian rows and kernel blocks at those parameters are
    then read off the cached activations and output sensitivities. ``rows``
    arguments select a subset of the cached inputs.
    """

    def __init__(self, params: ParamVector, X, spec: ArchSpec):
        self.params = params
        self.spec = spec
        self.X = _as_batch(X, spec)
        self.g, self.layers = backprop_deltas(params, self.X, spec, preactivation=True)
        self._arrays = params.unflatten()

    def _scale(self, rows, preactivation):
        g = self.g if rows is None else self.g[rows]
        return _head_scale(g, self.spec, preactivation)

    def _layer(self, l, rows):
        a, d = self.layers[l]
        return (a, d) if rows is None else (a[rows], d[rows])

    def outputs(self, rows=None, preactivation: bool = False) -> np.ndarray:
        g = self.g if rows is None else self.g[rows]
        if self.spec.output_activation == "sigmoid" and not preactivation:
            return sigmoid(g)
        return g.copy()

    def vjp(self, weights, rows=None, preactivation: bool = False) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64) * self._scale(rows, preactivation)
        out = np.empty(self.params.size)
        for slot in self.params.layout:
            a, d = self._layer(slot.layer, rows)
            dw = d * w[:, None]
            cols = slice(slot.offset, slot.offset + slot.size)
            out[cols] = (dw.T @ a).ravel() if slot.name.startswith("W") else dw.sum(axis=0)
        return out

    def jvp(self, tangent, rows=None, preactivation: bool = False) -> np.ndarray:
        t_arrays = ParamVector(np.asarray(tangent, dtype=np.float64), self.params.layout).unflatten()
        out = 0.0
        for l in range(self.spec.n_layers):
            if not self.spec.trainable(l):
                continue
            a, d = self._layer(l, rows)
            dh = a @ t_arrays[f"W{l}"].T
            if self.spec.bias:
                dh = dh + t_arrays[f"b{l}"]
            out = out + np.einsum("ij,ij->i", d, dh)
        return out * self._scale(rows, preactivation)

    def jacobian(self, rows=None, preactivation: bool = False) -> np.ndarray:
        scale = self._scale(rows, preactivation)
        n = scale.size
        J = np.empty((n, self.params.size))
        for slot in self.params.layout:
            a, d = self._layer(slot.layer, rows)
            cols = slice(slot.offset, slot.offset + slot.size)
            J[:, cols] = (d[:, :, None] * a[:, None, :]).reshape(n, -1) if slot.name.startswith("W") else d
        return J * scale[:, None]

    def kernel(self, rows=None, cols=None, preactivation: bool = False) -> np.ndarray:
        K = 0.0
        for l in range(self.spec.n_layers):
            if not self.spec.trainable(l):
                continue
            a1, d1 = self._layer(l, rows)
            a2, d2 = self._layer(l, cols)
            inner = a1 @ a2.T
            if self.spec.bias:
                inner += 1.0
            K = K + (d1 @ d2.T) * inner
        return K * np.outer(self._scale(rows, preactivation), self._scale(cols, preactivation))


def layer_names(spec: ArchSpec) -> list[int]:
    return [l for l in range(spec.n_layers) if spec.trainable(l)]


# ---------------------------------------------------------------------------
# losses


def loss_and_grad(pred, y, loss: str = "squared"):
    """Loss value and its derivative with respect to the prediction.

    Works elementwise on arrays. ``bce`` expects probabilities and clamps them to
    ``[1e-12, 1 - 1e-12]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss == "squared":
        r = pred - y
        out = 0.5 * r * r, r
    elif loss == "bce":
        p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
        out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)), (p - y) / (p * (1.0 - p))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if out[0].ndim == 0:
        return float(out[0]), float(out[1])
    return out


def batch_grad_matrix(params: ParamVector, batch_indices, inputs, spec: ArchSpec, preactivation: bool = False) -> GradMatrix:
    """``T_t`` restricted to its nonzero columns: ``grad f(x_i) / |B|`` for i in the batch."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty batch")
    X = np.asarray(getattr(inputs, "x_train", inputs), dtype=np.float64)
    if idx.min() < 0 or idx.max() >= X.shape[0]:
        raise IndexError("batch index outside the dataset")
    scale = 1.0 / idx.size
    J = jacobian(params, X[idx], spec, preactivation)
    return GradMatrix(J.T * scale, idx, scale)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: b"TLCK" | u32 LE header length | UTF-8 JSON header | float64 LE payload
# The header lists every stored array as {"name", "shape", "offset"} (offset in
# float64 units into the payload).

_MAGIC = b"TLCK"


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel())
        offset += arr.size
    meta = dict(header)
    meta["arrays"] = entries
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[8 + hlen :], dtype="<f8")
    arrays = {}
    for e in header.pop("arrays"):
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + size > payload.size:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = payload[e["offset"] : e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return header, arrays
