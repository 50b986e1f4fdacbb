"""Linear mode connectivity probes: spawn children from a shared checkpoint and interpolate."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .netcore import ArchSpec, ParamVector
from .train import Trainer, TrainConfig, classification_error


@dataclass
class SpawnPlan:
    spawn_steps: tuple[int, ...]
    seeds: tuple[int, int] = (1, 2)
    n_alpha: int = 30
    eval_size: int = 256

    def __post_init__(self):
        self.spawn_steps = tuple(int(s) for s in self.spawn_steps)
        if list(self.spawn_steps) != sorted(self.spawn_steps):
            raise ValueError("spawn steps must be sorted ascending")
        if self.n_alpha < 2:
            raise ValueError("the alpha grid needs both endpoints")

    @property
    def alphas(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_alpha)


@dataclass
class BarrierReport:
    spawn_step: int
    alphas: np.ndarray
    loss_lmc: np.ndarray
    loss_avg: np.ndarray
    acc_lmc: np.ndarray
    acc_avg: np.ndarray
    drift: dict = field(default_factory=dict)

    @property
    def barrier(self) -> float:
        return float(np.max(self.loss_lmc - self.loss_avg))

    @property
    def accuracy_gap(self) -> float:
        return float(np.max(self.acc_avg - self.acc_lmc))

    def rows(self) -> list[dict]:
        return [
            dict(spawn_step=self.spawn_step, alpha=float(a), loss_lmc=float(l), loss_avg=float(m),
                 acc_lmc=float(c), acc_avg=float(d))
            for a, l, m, c, d in zip(self.alphas, self.loss_lmc, self.loss_avg, self.acc_lmc, self.acc_avg)
        ]


# -- checkpoints and children ----------------------------------------------


def collect_checkpoints(trainer: Trainer, steps, until: int | None = None) -> dict[int, dict]:
    """Run ``trainer`` and snapshot its full state at each requested step (step 0 included)."""
    wanted = set(int(s) for s in steps)
    snaps = {}
    if trainer.t in wanted:
        snaps[trainer.t] = {k: v.copy() for k, v in trainer.state_arrays().items()}

    def grab(tr):
        if tr.t in wanted:
            snaps[tr.t] = {k: v.copy() for k, v in tr.state_arrays().items()}

    trainer.run(until=until, callback=grab)
    return snaps


def _child(cfg: TrainConfig, data, snapshot: dict, step: int, seed: int, until: int) -> Trainer:
    tr = Trainer(cfg, data.x_train, data.y_train, data.x_test, data.y_test)
    tr.load_state(snapshot, step)
    tr.run(until=until, seed=seed)
    return tr


def spawn_and_train(cfg: TrainConfig, data, checkpoints: dict, spawn_step: int, seed_a: int, seed_b: int,
                    until: int | None = None) -> tuple[ParamVector, ParamVector]:
    """Continue two copies of the checkpointed run, differing only in batch order."""
    if spawn_step not in checkpoints:
        raise KeyError(f"no checkpoint at step {spawn_step}")
    until = cfg.steps if until is None else until
    a = _child(cfg, data, checkpoints[spawn_step], spawn_step, seed_a, until)
    if seed_b == seed_a:
        return a.params, a.params.copy()
    b = _child(cfg, data, checkpoints[spawn_step], spawn_step, seed_b, until)
    return a.params, b.params


# -- interpolation ---------------------------------------------------------


def interpolate(theta_a: ParamVector, theta_b: ParamVector, alpha: float) -> ParamVector:
    if theta_a.layout != theta_b.layout:
        raise ValueError("parameter layouts differ")
    return theta_a.with_values(alpha * theta_a.values + (1.0 - alpha) * theta_b.values)


def _loss_acc(out, y, loss):
    ell = float(np.mean(netcore.loss_and_grad(out, y, loss)[0]))
    return ell, 1.0 - classification_error(out, y)


def barrier_scan(theta_a, theta_b, alphas, X, y, spec: ArchSpec, loss: str = "bce", spawn_step: int = 0) -> BarrierReport:
    """Loss/accuracy along the weight-space line, against the alpha-weighted endpoint averages."""
    if theta_a.layout != theta_b.layout:
        raise ValueError("parameter layouts differ")
    alphas = np.asarray(alphas, dtype=np.float64)
    la, aa = _loss_acc(netcore.predict_batch(theta_a, X, spec), y, loss)
    lb, ab = _loss_acc(netcore.predict_batch(theta_b, X, spec), y, loss)
    lmc = np.array([_loss_acc(netcore.predict_batch(interpolate(theta_a, theta_b, a), X, spec), y, loss) for a in alphas])
    return BarrierReport(
        spawn_step,
        alphas,
        lmc[:, 0],
        alphas * la + (1.0 - alphas) * lb,
        lmc[:, 1],
        alphas * aa + (1.0 - alphas) * ab,
    )


def ensemble_eval(theta_a, theta_b, alpha: float, X, y, spec: ArchSpec, mode: str = "prediction_avg",
                  loss: str = "bce") -> tuple[float, float, np.ndarray]:
    """(loss, accuracy, outputs) of the alpha-mixture of two models.

    ``prediction_avg`` mixes outputs; ``preactivation_avg`` mixes the heads'
    inputs and applies the output activation afterwards.
    """
    if mode == "prediction_avg":
        out = alpha * netcore.predict_batch(theta_a, X, spec) + (1.0 - alpha) * netcore.predict_batch(theta_b, X, spec)
    elif mode == "preactivation_avg":
        g = alpha * netcore.predict_batch(theta_a, X, spec, True) + (1.0 - alpha) * netcore.predict_batch(theta_b, X, spec, True)
        out = netcore.sigmoid(g) if spec.output_activation == "sigmoid" else g
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    ell, acc = _loss_acc(out, y, loss)
    return ell, acc, out


def grad_drift_by_layer(params_start: ParamVector, params_end: ParamVector, X, spec: ArchSpec) -> dict[int, float]:
    """Mean squared change of pre-activation output gradients per layer (weights and bias together)."""
    if params_start.layout != params_end.layout:
        raise ValueError("parameter layouts differ")
    d2 = (netcore.jacobian(params_end, X, spec, True) - netcore.jacobian(params_start, X, spec, True)) ** 2
    out = {}
    for layer, sl in params_start.layer_slices().items():
        out[layer] = float(d2[:, sl].mean())
    return out


# -- CSV output --------------------------------------------------------------


def write_barrier_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["spawn_step", "alpha", "loss_lmc", "loss_avg", "acc_lmc", "acc_avg"])
        w.writeheader()
        for rep in reports:
            w.writerows(rep.rows())


def write_drift_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spawn_step", "layer", "drift"])
        for rep in reports:
            for layer, val in sorted(rep.drift.items()):
                w.writerow([rep.spawn_step, layer, repr(float(val))])
