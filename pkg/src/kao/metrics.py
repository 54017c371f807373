"""Reconstruction metrics: PSNR, masked MSE and a uniform-window SSIM."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def masked_mse(a, b, m) -> float:
    """Mean squared error over the positions where ``m == 1``."""
    a, b = _pair(a, b)
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("mask must be binary")
    sel = np.broadcast_to(m.astype(bool), a.shape)
    n = int(sel.sum())
    if n == 0:
        raise DomainError("mask selects no pixels")
    d = (a - b)[sel]
    return float(np.dot(d, d) / n)


def ssim(a, b, window: int = 7, peak: float = 2.0) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` patches (population statistics)."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise DomainError("ssim expects grayscale grids")
        a, b = a[0], b[0]
    if min(a.shape) < window:
        raise DomainError(f"image {a.shape} smaller than window {window}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())
