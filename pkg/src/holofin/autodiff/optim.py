"""Adam with bias correction and cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError


def cosine_warm_restart_lr(step: float, T0: float = 10, T_mult: float = 2,
                           eta_max: float = 1e-3, eta_min: float = 1e-5) -> float:
    """Learning rate at (possibly fractional) ``step`` of an SGDR schedule.

    Restart periods have lengths T0, T0*T_mult, T0*T_mult^2, ...
    """
    if T0 <= 0 or T_mult < 1 or not eta_max >= eta_min >= 0:
        raise ValueError(f"invalid schedule T0={T0}, T_mult={T_mult}, eta_max={eta_max}, eta_min={eta_min}")
    t_cur, t_i = max(float(step), 0.0), float(T0)
    if T_mult == 1:
        t_cur = math.fmod(t_cur, t_i)
    else:
        while t_cur >= t_i:
            t_cur -= t_i
            t_i *= T_mult
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    T0: float = 10
    T_mult: float = 2
    eta_min: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def schedule(self, t: float) -> float:
        return cosine_warm_restart_lr(t, self.T0, self.T_mult, self.lr, self.eta_min)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them.

    ``lr`` overrides the base learning rate for this step, which is how the
    warm-restart schedule is applied.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params
