"""Gaussian RBF weights, adaptive bandwidth, structural-variance maps and the kernel-weighted loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DivergenceError, DomainError
from .grid import Grid, as_grid
from .schedule import NoiseSchedule, posterior_coefficients

POLICIES = ("fixed", "median")


@dataclass
class KernelConfig:
    bandwidth_policy: str = "median"
    sigma: float = 1.0
    sigma_floor: float = 1e-3
    hsv_window: int = 3
    hsv_epsilon: float = 0.0
    # per-pixel loss multiplier 1 + w * max(hsv, 0); 0 disables it
    hsv_loss_weight: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.bandwidth_policy not in POLICIES:
            raise ConfigError(f"bandwidth_policy must be one of {POLICIES}")
        if not self.sigma_floor > 0:
            raise ConfigError("sigma_floor must be positive")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.hsv_window < 3 or self.hsv_window % 2 == 0:
            raise ConfigError("hsv_window must be odd and >= 3")
        if self.hsv_epsilon < 0:
            raise ConfigError("hsv_epsilon must be >= 0")


def squared_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d.ravel(), d.ravel()))


def rbf_weight(sq_dist: float, sigma: float) -> float:
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    return math.exp(-sq_dist / (2.0 * sigma * sigma))


def rbf_kernel(a, b, sigma: float) -> float:
    """exp(-||a - b||^2 / (2 sigma^2)) over all elements."""
    return rbf_weight(squared_distance(a, b), sigma)


def bandwidth_from_distances(sq_dists: Sequence[float], cfg: KernelConfig) -> float:
    if len(sq_dists) == 0:
        raise DomainError("bandwidth needs at least one pair")
    if cfg.bandwidth_policy == "fixed":
        return max(cfg.sigma_floor, cfg.sigma)
    med = float(np.median(np.asarray(sq_dists, dtype=np.float64)))
    return max(cfg.sigma_floor, math.sqrt(med / 2.0))


def resolve_bandwidth(pairs, cfg: KernelConfig) -> float:
    """Fixed sigma, or the median heuristic giving the median pair weight exp(-1)."""
    return bandwidth_from_distances([squared_distance(a, b) for a, b in pairs], cfg)


def _luminance(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.ndim != 2:
        raise DomainError(f"expected [C,H,W] or [H,W] image, got shape {img.shape}")
    return img


def gradient_magnitude(image) -> np.ndarray:
    """Central-difference |grad I| with replicate-padded borders, float64 [H,W]."""
    img = np.pad(_luminance(image), 1, mode="edge")
    gx = (img[1:-1, 2:] - img[1:-1, :-2]) / 2.0
    gy = (img[2:, 1:-1] - img[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def hsv_map(image, window: int = 3, epsilon: float = 0.0) -> Grid:
    """Windowed variance of the gradient magnitude minus ``epsilon``, shape [1,H,W]."""
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"hsv window must be odd and >= 3, got {window}")
    g = gradient_magnitude(image)
    if min(g.shape) < window:
        raise DomainError(f"image {g.shape} smaller than window {window}")
    r = window // 2
    win = sliding_window_view(np.pad(g, r, mode="edge"), (window, window))
    var = win.var(axis=(-2, -1))
    return as_grid((var - epsilon)[None])


def kernel_weights(xt: np.ndarray, target: np.ndarray, cfg: KernelConfig) -> tuple[np.ndarray, float]:
    """Per-sample K(x_t, target) with a batch-resolved bandwidth."""
    d = np.asarray(xt, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    sq = (d.reshape(d.shape[0], -1) ** 2).sum(axis=1)
    sigma = bandwidth_from_distances(sq, cfg)
    return np.exp(-sq / (2.0 * sigma * sigma)), sigma


def kernel_weighted_loss(
    x0,
    xt,
    t,
    predict: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    sched: NoiseSchedule,
    cfg: KernelConfig,
    return_parts: bool = False,
    dtype: torch.dtype = torch.float32,
):
    """Mean over the batch of K(x_t, mu_q) * ||mu_theta - mu_q||^2 / (2 sigma_q^2(t)).

    ``x0``/``xt`` are [B,C,H,W] arrays or tensors, ``t`` holds one step in 2..T per sample
    and ``predict(xt, t)`` returns mu_theta. The kernel weight is computed without
    gradient. With ``return_parts`` the per-sample weights and terms are returned too.
    """
    x0_np = _np64(x0)
    xt_np = _np64(xt)
    t_np = np.asarray(t, dtype=np.int64).reshape(-1)
    if x0_np.shape != xt_np.shape or x0_np.shape[0] != t_np.size or t_np.size == 0:
        raise DomainError("x0, xt and t must describe the same nonempty batch")
    coefs = np.array([posterior_coefficients(int(s), sched) for s in t_np])
    c0, ct, var = coefs[:, 0], coefs[:, 1], coefs[:, 2]
    bshape = (-1,) + (1,) * (x0_np.ndim - 1)
    mu_q = c0.reshape(bshape) * x0_np + ct.reshape(bshape) * xt_np
    weights, sigma = kernel_weights(xt_np, mu_q, cfg)

    xt_t = torch.as_tensor(xt_np, dtype=dtype)
    mean = predict(xt_t, torch.as_tensor(t_np))
    diff = mean - torch.as_tensor(mu_q, dtype=mean.dtype)
    sq = diff * diff
    if cfg.hsv_loss_weight > 0:
        pix = np.stack([np.maximum(hsv_map(img, cfg.hsv_window, cfg.hsv_epsilon), 0.0) for img in x0_np])
        sq = sq * torch.as_tensor(1.0 + cfg.hsv_loss_weight * pix, dtype=sq.dtype)
    per_sample = sq.reshape(sq.shape[0], -1).sum(dim=1) / torch.as_tensor(2.0 * var, dtype=sq.dtype)
    terms = torch.as_tensor(weights, dtype=sq.dtype) * per_sample
    bad = ~torch.isfinite(terms.detach())
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0])
        raise DivergenceError(f"non-finite loss term for sample {i}", i)
    loss = terms.mean()
    if return_parts:
        return loss, {"weights": weights, "sigma": sigma, "terms": per_sample.detach().cpu().numpy()}
    return loss


def _np64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)

