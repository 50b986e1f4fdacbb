"""Training loop that keeps the telescoping traces and the smoother in lock-step.

Batch order is a pure function of ``(seed, step)``, so a run can be stopped,
checkpointed, resumed or forked (LMC children) without carrying RNG state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import netcore, smoother as sm
from .netcore import ArchSpec, ParamVector
from .optim import OptimConfig, OptimState, optim_step
from .telescope import TelescopeTrace, approx_error, init_trace, telescope_step


class InvariantError(RuntimeError):
    """The smoother no longer reproduces the telescoping predictions."""


def batch_indices(seed: int, t: int, n: int, batch_size: int | None) -> np.ndarray:
    """Training indices of step ``t`` (1-based): epoch-wise permutations, last partial batch dropped."""
    if batch_size is None or batch_size >= n:
        return np.arange(n)
    per_epoch = n // batch_size
    epoch, k = divmod(t - 1, per_epoch)
    perm = np.random.default_rng([int(seed) & 0xFFFFFFFF, epoch]).permutation(n)
    return np.sort(perm[k * batch_size : (k + 1) * batch_size])


@dataclass
class TrainConfig:
    spec: ArchSpec
    optim: OptimConfig
    steps: int
    batch_size: int | None = None
    loss: str = "squared"
    init_seed: int = 0
    data_seed: int = 0
    init_scale: float = 1.0
    track: bool = True
    post_activation: bool = False
    smoother: bool = False
    offset_mode: str = "exact"
    test_subset: int = 1000
    log_every: int = 100
    invariant_tol: float | None = 1e-7
    stop_at_perfect_train: bool = False
    plateau_epochs: int = 0
    plateau_tol: float = 1e-4
    smoother_budget: int = sm.DEFAULT_BUDGET

    def __post_init__(self):
        if self.smoother and self.loss != "squared":
            raise ValueError("the smoother decomposition requires squared loss")
        if self.smoother and self.spec.output_activation == "sigmoid":
            # the smoother is built from post-activation gradients
            self.post_activation = True


def classification_error(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((pred > 0.5) != (y > 0.5)))


@dataclass
class Trainer:
    cfg: TrainConfig
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    params: ParamVector | None = None
    binary: bool = True
    t: int = 0
    records: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.cfg
        self.x_train = np.asarray(self.x_train, dtype=np.float64)
        self.y_train = np.asarray(self.y_train, dtype=np.float64)
        self.x_test = np.asarray(self.x_test, dtype=np.float64)
        self.y_test = np.asarray(self.y_test, dtype=np.float64)
        if self.params is None:
            self.params = netcore.build_network(cfg.spec, cfg.init_seed, cfg.init_scale)
        self.theta0 = self.params.copy()
        self.opt = OptimState.zeros(self.params.size)
        self.x_track_test = self.x_test[: cfg.test_subset]
        self._x_tracked = np.vstack([self.x_train, self.x_track_test])
        self.trace_train: TelescopeTrace | None = None
        self.trace_test: TelescopeTrace | None = None
        self.smoother: sm.SmootherState | None = None
        if cfg.track or cfg.smoother:
            self.trace_train = init_trace(self.params, self.x_train, cfg.spec, cfg.post_activation)
            self.trace_test = init_trace(self.params, self.x_track_test, cfg.spec, cfg.post_activation)
        if cfg.smoother:
            self.smoother = sm.init_smoother(
                self.trace_train.f_true, self.trace_test.f_true, cfg.optim, self.params, cfg.smoother_budget
            )
        self._best_loss = np.inf
        self._stale_epochs = 0
        self.stopped = False
        self._t_start = time.perf_counter()

    # -- single step ------------------------------------------------------

    def step(self, seed: int | None = None) -> np.ndarray:
        cfg = self.cfg
        t = self.t + 1
        n = len(self.y_train)
        batch = batch_indices(cfg.data_seed if seed is None else seed, t, n, cfg.batch_size)
        yb = self.y_train[batch]
        prev = self.params
        # one pass at theta_{t-1} serves the loss gradient, the traces and the smoother
        if self.trace_train is not None:
            lin = netcore.Linearization(prev, self._x_tracked, cfg.spec)
            rows = batch
        else:
            lin = netcore.Linearization(prev, self.x_train[batch], cfg.spec)
            rows = None
        if cfg.spec.output_activation == "sigmoid" and cfg.loss == "bce":
            # sigma' cancels against the bce derivative: d loss / d g = sigma(g) - y
            weights = lin.outputs(rows) - yb
            raw_grad = lin.vjp(weights / batch.size, rows, preactivation=True)
        else:
            _, g_loss = netcore.loss_and_grad(lin.outputs(rows), yb, cfg.loss)
            raw_grad = lin.vjp(g_loss / batch.size, rows)
        delta, self.opt = optim_step(self.opt, cfg.optim, raw_grad, prev)
        if self.smoother is not None:
            sm.smoother_step(
                self.smoother,
                cfg.optim,
                prev,
                cfg.spec,
                self.x_train,
                self.x_track_test,
                batch,
                self.y_train,
                self.trace_train.f_true,
                self.opt.gammas[-1],
                t,
                self.opt.phi,
                cfg.offset_mode,
                lin,
            )
        if self.trace_train is not None:
            df = lin.jvp(delta, preactivation=not cfg.post_activation)
            telescope_step(self.trace_train, delta, prev, df[:n])
            telescope_step(self.trace_test, delta, prev, df[n:])
        self.params = prev.with_values(prev.values + delta)
        self.t = t
        return delta

    # -- metrics ----------------------------------------------------------

    def _outputs(self, X):
        return netcore.predict_batch(self.params, X, self.cfg.spec)

    def metrics(self) -> dict:
        cfg = self.cfg
        f_tr = self._outputs(self.x_train)
        f_te = self._outputs(self.x_test)
        rec = {
            "step": self.t,
            "train_loss": float(np.mean(netcore.loss_and_grad(f_tr, self.y_train, cfg.loss)[0])),
            "test_loss": float(np.mean(netcore.loss_and_grad(f_te, self.y_test, cfg.loss)[0])) if f_te.size else None,
        }
        if self.binary:
            rec["train_err"] = classification_error(f_tr, self.y_train)
            rec["test_err"] = classification_error(f_te, self.y_test) if f_te.size else None
        if self.trace_test is not None:
            rec["mean_abs_tilde"], rec["mean_abs_lin"] = approx_error(self.trace_test)
            rec["mean_abs_tilde_train"], rec["mean_abs_lin_train"] = approx_error(self.trace_train)
        if self.smoother is not None:
            n = self.smoother.n
            rec["p_train"] = sm.effective_params(self.smoother.S_train, n)
            rec["p_test"] = sm.effective_params(self.smoother.S_test, n) if self.smoother.S_test.size else None
            rec["invariant_gap"] = sm.invariant_gap(
                self.smoother, self.y_train, self.trace_train.f_tilde, self.trace_test.f_tilde
            )
            if cfg.invariant_tol is not None and rec["invariant_gap"] > cfg.invariant_tol:
                raise InvariantError(
                    f"step {self.t}: |S y + c - f_tilde| = {rec['invariant_gap']:.3e} > {cfg.invariant_tol:.1e}"
                )
        rec["wall_time"] = time.perf_counter() - self._t_start
        return rec

    def log(self) -> dict:
        rec = self.metrics()
        self.records.append(rec)
        return rec

    # -- loop -------------------------------------------------------------

    def _epoch_end_checks(self):
        cfg = self.cfg
        if not (cfg.stop_at_perfect_train or cfg.plateau_epochs):
            return
        n = len(self.y_train)
        per_epoch = 1 if cfg.batch_size is None or cfg.batch_size >= n else n // cfg.batch_size
        if self.t % per_epoch:
            return
        f_tr = self._outputs(self.x_train)
        if cfg.stop_at_perfect_train and classification_error(f_tr, self.y_train) == 0.0:
            self.stopped = True
            return
        if cfg.plateau_epochs:
            loss = float(np.mean(netcore.loss_and_grad(f_tr, self.y_train, cfg.loss)[0]))
            if loss < self._best_loss - cfg.plateau_tol:
                self._best_loss, self._stale_epochs = loss, 0
            else:
                self._stale_epochs += 1
                if self._stale_epochs >= cfg.plateau_epochs:
                    self.stopped = True

    def run(self, until: int | None = None, seed: int | None = None, callback=None) -> list:
        """Train up to step ``until`` (default: ``cfg.steps``), logging on the configured cadence."""
        until = self.cfg.steps if until is None else until
        if self.t == 0 and not self.records:
            self.log()
        while self.t < until and not self.stopped:
            self.step(seed)
            self._epoch_end_checks()
            if self.t % self.cfg.log_every == 0 or self.t == until or self.stopped:
                self.log()
            if callback is not None:
                callback(self)
        return self.records

    # -- checkpoint state -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "params": self.params.values,
            "theta0": self.theta0.values,
            "opt_m": self.opt.m,
            "opt_v": self.opt.v,
        }
        if self.opt.phi is not None:
            arrays["opt_phi"] = self.opt.phi
        for name, trace in (("train", self.trace_train), ("test", self.trace_test)):
            if trace is not None:
                arrays[f"{name}_f_init"] = trace.f_init
                arrays[f"{name}_f_true"] = trace.f_true
                arrays[f"{name}_f_tilde"] = trace.f_tilde
                arrays[f"{name}_displacement"] = trace.displacement
        if self.smoother is not None:
            for k, v in self.smoother.arrays().items():
                arrays[f"sm_{k}"] = v
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray], step: int, stale: tuple[float, int] = (np.inf, 0)):
        self.params = self.params.with_values(arrays["params"])
        self.theta0 = self.params.with_values(arrays["theta0"])
        self.opt = OptimState(
            step,
            arrays["opt_m"].copy(),
            arrays["opt_v"].copy(),
            arrays["opt_phi"].copy() if "opt_phi" in arrays else None,
            [self.cfg.optim.lr(s) for s in range(1, step + 1)],
        )
        for name in ("train", "test"):
            trace = getattr(self, f"trace_{name}")
            if trace is None:
                continue
            trace.params_init = self.theta0.copy()
            trace.f_init = arrays[f"{name}_f_init"].copy()
            trace.f_true = arrays[f"{name}_f_true"].copy()
            trace.f_tilde = arrays[f"{name}_f_tilde"].copy()
            trace.displacement = arrays[f"{name}_displacement"].copy()
            trace.t = step
        if self.smoother is not None:
            sub = {k[3:]: v for k, v in arrays.items() if k.startswith("sm_")}
            self.smoother = sm.SmootherState.from_arrays(sub, step)
        self._best_loss, self._stale_epochs = stale
        self.t = step
