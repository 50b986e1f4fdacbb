"""Telescoping first-order model of training.

For every tracked input the trace carries three predictions:

* ``f_true``  -- the network at the current parameters,
* ``f_tilde`` -- ``f(theta_0) + sum_t grad f_{theta_{t-1}}(x) . delta_theta_t``,
* ``f_lin``   -- ``f(theta_0) + grad f_{theta_0}(x) . (theta_t - theta_0)``.

Directional derivatives are evaluated with forward-mode JVPs, so no p-length
gradient is ever stored per input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import ArchSpec, ParamVector, forward, jvp, kernel_matrix, predict_grad, sigmoid


@dataclass
class TelescopeTrace:
    inputs: np.ndarray
    spec: ArchSpec
    params_init: ParamVector
    f_init: np.ndarray
    f_true: np.ndarray
    f_tilde: np.ndarray
    displacement: np.ndarray
    post_activation: bool = False
    t: int = 0

    @property
    def f_lin(self) -> np.ndarray:
        if not self.displacement.any():
            return self.f_init.copy()
        _, df = jvp(self.params_init, self.inputs, self.displacement, self.spec, not self.post_activation)
        return self.f_init + df

    def _read(self, values: np.ndarray) -> np.ndarray:
        # pre-activation tracking applies the head at read time
        if self.spec.output_activation == "sigmoid" and not self.post_activation:
            return sigmoid(values)
        return values

    def predictions(self) -> dict[str, np.ndarray]:
        """Output-space values of the three predictors."""
        return {
            "f_true": self._read(self.f_true),
            "f_tilde": self._read(self.f_tilde),
            "f_lin": self._read(self.f_lin),
        }

    def copy(self) -> "TelescopeTrace":
        return TelescopeTrace(
            self.inputs,
            self.spec,
            self.params_init,
            self.f_init.copy(),
            self.f_true.copy(),
            self.f_tilde.copy(),
            self.displacement.copy(),
            self.post_activation,
            self.t,
        )


def _tracked_values(params, X, spec, post_activation):
    g, _ = forward(params, X, spec)
    if spec.output_activation == "sigmoid" and post_activation:
        return sigmoid(g)
    return g


def init_trace(params: ParamVector, inputs, spec: ArchSpec, post_activation: bool = False) -> TelescopeTrace:
    """Start a trace at theta_0; with a sigmoid head, ``post_activation`` telescopes sigma(g)."""
    X = np.asarray(inputs, dtype=np.float64)
    f0 = _tracked_values(params, X, spec, post_activation)
    return TelescopeTrace(
        inputs=X,
        spec=spec,
        params_init=params.copy(),
        f_init=f0.copy(),
        f_true=f0.copy(),
        f_tilde=f0.copy(),
        displacement=np.zeros(params.size),
        post_activation=post_activation,
    )


def telescope_step(trace: TelescopeTrace, delta: np.ndarray, params_prev: ParamVector, df=None) -> TelescopeTrace:
    """Advance by one parameter update (in place; the trace is also returned).

    ``df`` may carry a precomputed ``grad f_{theta_{t-1}}(x) . delta`` for every
    tracked input; otherwise it is evaluated here.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (params_prev.size,):
        raise ValueError(f"update has shape {delta.shape}, parameters have {params_prev.size}")
    spec = trace.spec
    if df is None:
        _, df = jvp(params_prev, trace.inputs, delta, spec, not trace.post_activation)
    trace.f_tilde += df
    trace.displacement += delta
    trace.f_true = _tracked_values(params_prev.with_values(params_prev.values + delta), trace.inputs, spec, trace.post_activation)
    trace.t += 1
    return trace


def approx_error(trace: TelescopeTrace) -> tuple[float, float]:
    """Mean absolute deviation of (f_tilde, f_lin) from the true network output."""
    if trace.inputs.shape[0] == 0:
        raise ValueError("no tracked inputs")
    pred = trace.predictions()
    return (
        float(np.mean(np.abs(pred["f_true"] - pred["f_tilde"]))),
        float(np.mean(np.abs(pred["f_true"] - pred["f_lin"]))),
    )


def raw_tangent_kernel(params, x, x_i, spec, preactivation=False) -> float:
    return float(predict_grad(params, x, spec, preactivation) @ predict_grad(params, x_i, spec, preactivation))


def tangent_kernel(params, x, x_i, in_batch: bool, batch_size: int, spec, preactivation=False) -> float:
    """``1{i in B} / |B| * grad f(x) . grad f(x_i)`` at the given parameters."""
    if not in_batch:
        return 0.0
    return raw_tangent_kernel(params, x, x_i, spec, preactivation) / batch_size


def cross_temporal_kernel(params_t, params_k, x, x_i, in_batch: bool, batch_size: int, spec, preactivation=False) -> float:
    """``1{i in B_k} / |B_k| * grad f_{params_t}(x) . grad f_{params_k}(x_i)``."""
    if not in_batch:
        return 0.0
    gx = predict_grad(params_t, x, spec, preactivation)
    gi = predict_grad(params_k, x_i, spec, preactivation)
    return float(gx @ gi) / batch_size


@dataclass
class KernelSnapshot:
    t: int
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel snapshot contains non-finite values")


def kernel_snapshot(params, tracked, train_inputs, spec, t: int, batch=None, preactivation=False) -> KernelSnapshot:
    """Kernel rows of ``tracked`` against the training set at step ``t``.

    With ``batch`` given, entries outside the batch are zeroed and the rest divided
    by the batch size; without it the raw (unmasked) rows are returned.
    """
    K = kernel_matrix(params, tracked, train_inputs, spec, preactivation)
    if batch is None:
        return KernelSnapshot(t, K)
    n = K.shape[1]
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(batch)] = True
    return KernelSnapshot(t, np.where(mask, K / mask.sum(), 0.0), mask)


def kernel_row_norm(snapshot: KernelSnapshot, row: int) -> float:
    return float(np.linalg.norm(snapshot.values[row]))


def kernel_row_norms(K: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", K, K))
