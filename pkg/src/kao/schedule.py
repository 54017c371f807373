"""Discrete Gaussian diffusion: linear-beta schedule, forward kernel, marginals, posterior.

Arrays are indexed by step with index 0 reserved for the clean image
(``alpha[0] = alpha_bar[0] = 1``), so ``alpha_bar[t]`` reads directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .grid import Grid, SeededRng, as_grid


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise DomainError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "alpha": self.alpha[1:].tolist(),
            "alpha_bar": self.alpha_bar[1:].tolist(),
            "posterior_var": self.posterior_var[1:].tolist(),
        }


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = np.concatenate([[1.0], 1.0 - beta])
    alpha_bar = np.cumprod(alpha)
    post = np.zeros(T + 1)
    # (1 - abar_{t-1}) (1 - a_t) / (1 - abar_t); zero at t = 1 since abar_0 = 1
    post[1:] = (1.0 - alpha_bar[:-1]) * (1.0 - alpha[1:]) / (1.0 - alpha_bar[1:])
    for arr in (alpha, alpha_bar, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, alpha, alpha_bar, post)


def forward_step(x_prev: Grid, t: int, sched: NoiseSchedule, rng: SeededRng) -> Grid:
    t = sched.check_step(t)
    x_prev = as_grid(x_prev)
    a = sched.alpha[t]
    z = rng.normal(x_prev.shape)
    return as_grid(np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * z)


def marginal_sample(x0: Grid, t: int, sched: NoiseSchedule, rng: SeededRng) -> Grid:
    """Closed-form q(x_t | x_0); ``t = 0`` returns ``x0`` unchanged."""
    t = sched.check_step(t, lo=0)
    x0 = as_grid(x0)
    if t == 0:
        return x0.copy()
    ab = sched.alpha_bar[t]
    z = rng.normal(x0.shape)
    return as_grid(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z)


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float, float]:
    """Return ``(c0, ct, var)`` with posterior mean ``c0*x0 + ct*xt``."""
    t = sched.check_step(t, lo=2)
    a, ab, ab_prev = sched.alpha[t], sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    return float(c0), float(ct), float(sched.posterior_var[t])


def posterior_params(x0: Grid, xt: Grid, t: int, sched: NoiseSchedule) -> tuple[Grid, float]:
    """Mean and variance of q(x_{t-1} | x_t, x_0) for ``2 <= t <= T``."""
    c0, ct, var = posterior_coefficients(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    if x0.shape != xt.shape:
        raise DomainError(f"x0 {x0.shape} and xt {xt.shape} differ in shape")
    return as_grid(c0 * x0 + ct * xt), var
