"""Optimizers as explicit state machines.

Every quantity the smoother recursions consume (momentum buffer, scaling vector
phi, step size) is kept in :class:`OptimState` rather than hidden inside an
update rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("sgd", "momentum", "weight_decay", "adamw")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"
    gamma: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    eps: float = 1e-8
    warmup_steps: int = 0
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "decay_steps", tuple(sorted(int(s) for s in self.decay_steps)))
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.gamma > 0 or not self.decay_factor > 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")

    def lr(self, t: int) -> float:
        """Step size for step ``t`` (1-based): linear warmup, then stepwise decay."""
        gamma = self.gamma
        if self.warmup_steps > 0 and t < self.warmup_steps:
            gamma *= t / self.warmup_steps
        for boundary in self.decay_steps:
            if t > boundary:
                gamma *= self.decay_factor
        return gamma

    @property
    def uses_momentum(self) -> bool:
        return self.kind in ("momentum", "adamw")

    @property
    def decay(self) -> float:
        return self.weight_decay if self.kind in ("weight_decay", "adamw") else 0.0


@dataclass
class OptimState:
    t: int
    m: np.ndarray
    v: np.ndarray
    phi: np.ndarray | None = None
    gammas: list[float] = field(default_factory=list)

    @classmethod
    def zeros(cls, p: int) -> "OptimState":
        return cls(0, np.zeros(p), np.zeros(p))

    def copy(self) -> "OptimState":
        return OptimState(
            self.t,
            self.m.copy(),
            self.v.copy(),
            None if self.phi is None else self.phi.copy(),
            list(self.gammas),
        )


def optim_step(state: OptimState, cfg: OptimConfig, raw_grad: np.ndarray, params) -> tuple[np.ndarray, OptimState]:
    """One update. ``raw_grad`` is ``T_t g_t``; returns ``(delta_theta, new_state)``.

    The momentum buffer is the bias-uncorrected EMA ``m_t = b1 m_{t-1} + (1-b1) g_t``,
    so ``m_t / (1 - b1**t)`` is the normalized average used by the update.
    AdamW decay is decoupled: it never enters ``m`` or ``v``.
    """
    theta = np.asarray(getattr(params, "values", params), dtype=np.float64)
    g = np.asarray(raw_grad, dtype=np.float64)
    t = state.t + 1
    gamma = cfg.lr(t)
    new = OptimState(t, state.m, state.v, state.phi, state.gammas + [gamma])

    if cfg.kind == "sgd":
        delta = -gamma * g
    elif cfg.kind == "weight_decay":
        delta = -gamma * (g + cfg.weight_decay * theta)
    else:
        b1 = cfg.beta1
        new.m = b1 * state.m + (1.0 - b1) * g
        m_hat = new.m / (1.0 - b1**t)
        if cfg.kind == "momentum":
            delta = -gamma * m_hat
        else:
            b2 = cfg.beta2
            new.v = b2 * state.v + (1.0 - b2) * g * g
            new.phi = np.sqrt(new.v / (1.0 - b2**t)) + cfg.eps
            delta = -gamma * (m_hat / new.phi + cfg.weight_decay * theta)
    return delta, new


def expose_scaling(state: OptimState) -> np.ndarray:
    """The phi_t used by the most recent adaptive step."""
    if state.phi is None:
        raise RuntimeError("no adaptive step has been taken yet")
    return state.phi
