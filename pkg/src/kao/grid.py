"""Dense float32 grids, counter-based seeded randomness and a finite-difference gradient harness.

A grid is a plain ``numpy.ndarray`` of dtype float32; the helpers here enforce
the invariants (finite values, declared shape) at operation boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GradientCheckError

Grid = np.ndarray

DTYPE = np.float32


def as_grid(x, shape: Sequence[int] | None = None) -> Grid:
    g = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None and tuple(g.shape) != tuple(shape):
        raise DomainError(f"expected shape {tuple(shape)}, got {g.shape}")
    return g


def from_flat(shape: Sequence[int], data: Sequence[float]) -> Grid:
    shape = tuple(int(s) for s in shape)
    flat = np.asarray(data, dtype=DTYPE).ravel()
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise DomainError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return flat.reshape(shape).copy()


def ensure_finite(g: np.ndarray, what: str = "grid") -> np.ndarray:
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(np.asarray(g)))[0])
        raise DomainError(f"{what} has a non-finite value at flat index {bad}")
    return g


class SeededRng:
    """Philox-backed generator.

    ``stream(i)`` derives an independent generator keyed by ``(seed, *path, i)``,
    so draws for item ``i`` do not depend on how many other items were drawn.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + (int(index),))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def gaussian_sample(rng: SeededRng, shape, mean=0.0, std=1.0) -> Grid:
    """Draw ``mean + std * z`` with ``z`` standard normal from ``rng``."""
    std = np.asarray(std, dtype=DTYPE)
    if np.any(std < 0):
        raise DomainError("standard deviation must be non-negative")
    mean = np.asarray(mean, dtype=DTYPE)
    try:
        np.broadcast_shapes(tuple(shape), mean.shape, std.shape)
    except ValueError as exc:
        raise DomainError(f"mean/std not broadcastable to {tuple(shape)}") from exc
    z = rng.normal(tuple(shape))
    return as_grid(mean + std * z)


@dataclass
class GradientReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    rel_tol: float
    max_rel_error: float = field(init=False)

    def __post_init__(self):
        self.max_rel_error = float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rel_tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def check_gradient(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    rel_tol: float = 1e-3,
    coords: Sequence[int] | None = None,
    abs_floor: float = 1e-8,
) -> GradientReport:
    """Compare ``f``'s analytic gradient with central differences.

    ``f`` maps a float64 array to ``(value, grad)``. The step per coordinate is
    ``1e-3 * (1 + |x_i|)``. ``coords`` restricts the check to flat indices.
    Gradients smaller than ``abs_floor`` in magnitude are compared absolutely.
    """
    x = np.array(x, dtype=np.float64)
    value, grad = f(x.copy())
    if not np.isfinite(value):
        raise GradientCheckError("objective is non-finite at the base point")
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    idx = np.arange(x.size) if coords is None else np.asarray(coords, dtype=np.int64)
    flat = x.reshape(-1)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        h = 1e-3 * (1.0 + abs(flat[i]))
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(xp.reshape(x.shape))[0]
        fm = f(xm.reshape(x.shape))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientCheckError(f"objective non-finite when perturbing coordinate {int(i)}", int(i))
        numeric[k] = (fp - fm) / (2.0 * h)
    analytic = grad.reshape(-1)[idx]
    return GradientReport(idx, analytic, numeric, relative_error(analytic, numeric, abs_floor), rel_tol)
