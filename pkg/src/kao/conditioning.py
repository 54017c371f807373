"""Latent-space conditioning: mask pyramids, latent blending, explicit propagation and kernel token blending.

Tensors are [B, C, h, w] latent maps; masks are [B, 1, h, w] (a missing batch
axis is added and removed transparently).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DomainError
from .grid import Grid, as_grid
from .kernel import KernelConfig, bandwidth_from_distances

REGION_THRESHOLD = 0.5


def downsample_mask(m, target: Sequence[int]) -> Grid:
    """Non-overlapping average pooling of ``m`` ([..., H, W]) down to ``target`` (h, w)."""
    m = np.asarray(m, dtype=np.float32)
    H, W = m.shape[-2:]
    h, w = int(target[0]), int(target[1])
    if h <= 0 or w <= 0 or H % h or W % w:
        raise ConfigError(f"mask extents {(H, W)} are not integer multiples of {(h, w)}")
    ky, kx = H // h, W // w
    pooled = m.reshape(m.shape[:-2] + (h, ky, w, kx)).mean(axis=(-3, -1), dtype=np.float64)
    return as_grid(pooled)


@dataclass
class MaskPyramid:
    m: Grid
    levels: dict[str, Grid] = field(default_factory=dict)

    @classmethod
    def build(cls, m, extents: Mapping[str, Sequence[int]]) -> "MaskPyramid":
        m = as_grid(m)
        if not np.all((m == 0) | (m == 1)):
            raise DomainError("mask must be binary")
        return cls(m, {name: downsample_mask(m, hw) for name, hw in extents.items()})


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise DomainError(f"expected a [B,C,h,w] or [C,h,w] map, got {tuple(x.shape)}")
    return x, False


def blend_latent(h_infr: torch.Tensor, h_cond: torch.Tensor, dm: torch.Tensor) -> torch.Tensor:
    """h* = h_infr * (1 - D(m)) + h_cond * D(m), with D(m) broadcast over channels."""
    if h_infr.shape != h_cond.shape:
        raise DomainError(f"latent shapes differ: {tuple(h_infr.shape)} vs {tuple(h_cond.shape)}")
    if dm.shape[-2:] != h_infr.shape[-2:] or dm.shape[-3] != 1:
        raise DomainError(f"mask {tuple(dm.shape)} does not align with latent {tuple(h_infr.shape)}")
    dm = dm.to(h_infr.dtype)
    return h_infr * (1 - dm) + h_cond * dm


@dataclass
class PooledRegions:
    cond: torch.Tensor  # [B, C]
    infr: torch.Tensor  # [B, C]
    assign: torch.Tensor  # [B, 1, h, w] bool, True where conditioned
    shape: tuple


def maskwise_maxpool(dm: torch.Tensor, h: torch.Tensor, threshold: float = REGION_THRESHOLD) -> PooledRegions:
    """Channelwise max over the conditioned (D(m) >= threshold) and inferred regions.

    An empty region takes the other region's vector.
    """
    h, _ = _batched(h)
    dm, _ = _batched(dm)
    if dm.shape[0] != h.shape[0] or dm.shape[-2:] != h.shape[-2:] or dm.shape[1] != 1:
        raise DomainError(f"mask {tuple(dm.shape)} does not align with latent {tuple(h.shape)}")
    assign = dm >= threshold
    neg = torch.finfo(h.dtype).min
    flat = h.flatten(2)
    a = assign.flatten(2)
    cond = torch.where(a, flat, torch.full_like(flat, neg)).amax(dim=2)
    infr = torch.where(a, torch.full_like(flat, neg), flat).amax(dim=2)
    has_cond = a.any(dim=2)
    has_infr = (~a).any(dim=2)
    cond = torch.where(has_cond, cond, infr)
    infr = torch.where(has_infr, infr, cond)
    return PooledRegions(cond, infr, assign, tuple(h.shape))


class EPMixer(nn.Module):
    """Residual two-layer mixer over the concatenated region vectors (the omega parameters)."""

    def __init__(self, channels: int, hidden: int = 2):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        nn.init.normal_(self.fc1.weight, std=0.02)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, cond: torch.Tensor, infr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if cond.shape[-1] != self.channels or infr.shape != cond.shape:
            raise DomainError(f"mixer expects two length-{self.channels} vectors")
        z = torch.cat([cond, infr], dim=-1)
        upd = self.fc2(torch.tanh(self.fc1(z)))
        return cond + upd[..., : self.channels], infr + upd[..., self.channels :]


def ep_mix(cond: torch.Tensor, infr: torch.Tensor, mixer: EPMixer) -> tuple[torch.Tensor, torch.Tensor]:
    return mixer(cond, infr)


def maskwise_unpool(mixed: tuple[torch.Tensor, torch.Tensor], pooled: PooledRegions, h: torch.Tensor) -> torch.Tensor:
    """Add each region's mixer update back onto every position of that region."""
    h, squeeze = _batched(h)
    if tuple(h.shape) != pooled.shape:
        raise DomainError(f"assignment map was built for {pooled.shape}, got latent {tuple(h.shape)}")
    cond, infr = mixed
    if cond.shape != pooled.cond.shape or infr.shape != pooled.infr.shape:
        raise DomainError("mixed vectors do not match the pooled regions")
    d_cond = (cond - pooled.cond)[:, :, None, None]
    d_infr = (infr - pooled.infr)[:, :, None, None]
    out = h + torch.where(pooled.assign, d_cond, d_infr)
    return out[0] if squeeze else out


def explicit_propagation(h: torch.Tensor, dm: torch.Tensor, mixer: EPMixer,
                         threshold: float = REGION_THRESHOLD) -> torch.Tensor:
    pooled = maskwise_maxpool(dm, h, threshold)
    return maskwise_unpool(ep_mix(pooled.cond, pooled.infr, mixer), pooled, h)


def token_kernel(h_infr: torch.Tensor, h_cond: torch.Tensor, sigma=None,
                 cfg: KernelConfig | None = None) -> torch.Tensor:
    """Per-sample RBF weight between two latent maps, returned as a [B] tensor (no gradient)."""
    with torch.no_grad():
        d = (h_infr - h_cond).double().flatten(1)
        sq = (d * d).sum(dim=1).cpu().numpy()
    if sigma is None:
        cfg = cfg or KernelConfig()
        sig = np.array([bandwidth_from_distances([s], cfg) for s in sq])
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), sq.shape)
        if np.any(sig <= 0):
            raise DomainError("sigma must be positive")
    return torch.as_tensor(np.exp(-sq / (2.0 * sig * sig)), dtype=h_infr.dtype)


def kernel_token_blend(h_infr: torch.Tensor, h_cond: torch.Tensor, sigma=None,
                       cfg: KernelConfig | None = None) -> torch.Tensor:
    """K * h_infr + (1 - K) * h_cond with one scalar K per sample over the whole map."""
    if h_infr.shape != h_cond.shape:
        raise DomainError(f"latent shapes differ: {tuple(h_infr.shape)} vs {tuple(h_cond.shape)}")
    hi, squeeze = _batched(h_infr)
    hc, _ = _batched(h_cond)
    k = token_kernel(hi, hc, sigma, cfg)[:, None, None, None]
    out = k * hi + (1 - k) * hc
    return out[0] if squeeze else out


class LatentConditioner:
    """Conditioning hook applied at the denoiser's tap points.

    Per tap the order is fixed: latent blend (``lsc``), explicit propagation
    (taps listed in ``ep_taps``), then kernel token blend (``kernel_blend``).
    """

    def __init__(self, cond_taps: Mapping[str, torch.Tensor], masks: Mapping[str, torch.Tensor],
                 mixers: Mapping[str, EPMixer], *, lsc: bool = True, ep_taps: Sequence[str] = (),
                 kernel_blend: bool = False, kernel_cfg: KernelConfig | None = None):
        self.cond_taps = {k: v.detach() for k, v in cond_taps.items()}
        self.masks = dict(masks)
        self.mixers = mixers
        self.lsc = lsc
        self.ep_taps = tuple(ep_taps)
        self.kernel_blend = kernel_blend
        self.kernel_cfg = kernel_cfg or KernelConfig()
        unknown = set(self.ep_taps) - set(mixers)
        if unknown:
            raise ConfigError(f"no mixer for EP taps {sorted(unknown)}")

    @property
    def active(self) -> bool:
        return self.lsc or bool(self.ep_taps) or self.kernel_blend

    def __call__(self, name: str, h: torch.Tensor) -> torch.Tensor:
        if name not in self.cond_taps:
            return h
        h_cond = self.cond_taps[name].to(h.dtype)
        dm = self.masks[name].to(h.dtype)
        if self.lsc:
            h = blend_latent(h, h_cond, dm)
        if name in self.ep_taps:
            h = explicit_propagation(h, dm, self.mixers[name])
        if self.kernel_blend:
            h = kernel_token_blend(h, h_cond, cfg=self.kernel_cfg)
        return h
