"""Conditioned reverse diffusion (masked inpainting) and plain ancestral sampling.

Each item owns four rng streams derived from its generator: 0 initial noise and
p-sample noise, 1 q-sample of the known pixels at t-1, 2 q-sample feeding the
conditioning pass, 3 re-noising for resampling. Unconditional sampling reads only
stream 0, so an all-hole, all-flags-off inpainting run reproduces it bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .conditioning import LatentConditioner, MaskPyramid
from .denoiser import ep_taps_for
from .errors import ConfigError, DivergenceError, DomainError
from .grid import Grid, SeededRng, as_grid
from .kernel import KernelConfig
from .schedule import NoiseSchedule

P_STREAM, Q_STREAM, COND_STREAM, RESAMPLE_STREAM = range(4)


@dataclass
class SamplerConfig:
    T: Optional[int] = None
    resample_jumps: int = 1
    seed: int = 0
    lsc: bool = True
    ep: bool = True
    ep_modules: int = 2
    kernel_blend: bool = True
    # what the conditioning pass sees inside the hole: noised zeros, i.e. q(x_t | x0 * m) ("zero"),
    # or the current iterate ("xt")
    cond_fill: str = "zero"
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def validate(self, sched: NoiseSchedule | None = None):
        if self.resample_jumps < 0:
            raise ConfigError("resample_jumps must be >= 0")
        ep_taps_for(self.ep_modules)
        if self.cond_fill not in ("xt", "zero"):
            raise ConfigError("cond_fill must be 'xt' or 'zero'")
        if sched is not None and self.T is not None and self.T != sched.T:
            raise ConfigError(f"sampler T={self.T} does not match schedule T={sched.T}")

    @property
    def conditioned(self) -> bool:
        return self.lsc or (self.ep and self.ep_modules > 0) or self.kernel_blend

    @property
    def ep_taps(self) -> tuple[str, ...]:
        return ep_taps_for(self.ep_modules) if self.ep else ()


def blend_pixels(x_infr, x_cond, m) -> Grid:
    """x_infr where m == 0, x_cond where m == 1."""
    x_infr = np.asarray(x_infr)
    x_cond = np.asarray(x_cond)
    m = np.asarray(m)
    if x_infr.shape != x_cond.shape:
        raise DomainError(f"shape mismatch {x_infr.shape} vs {x_cond.shape}")
    if m.shape != x_infr.shape:
        try:
            m = np.broadcast_to(m, x_infr.shape)
        except ValueError as exc:
            raise DomainError(f"mask {m.shape} does not match {x_infr.shape}") from exc
    return as_grid(np.where(m == 1, x_cond, x_infr))


def expected_forward_passes(T: int, cfg: SamplerConfig) -> int:
    return T * (1 + int(cfg.conditioned)) * (1 + cfg.resample_jumps)


def _model_dtype(model) -> torch.dtype:
    try:
        return next(model.parameters()).dtype
    except (AttributeError, StopIteration):
        return torch.float32


def _draw(streams: Sequence[SeededRng], shape) -> np.ndarray:
    return np.stack([s.normal(shape) for s in streams])


def _check_finite(x: np.ndarray, t: int, what: str):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what} at step {t}", t)


def _p_sample(model, x: np.ndarray, t: int, sched: NoiseSchedule, p_streams, hook=None) -> np.ndarray:
    dtype = _model_dtype(model)
    with torch.no_grad():
        mean, _ = model(torch.as_tensor(x, dtype=dtype), torch.full((x.shape[0],), t), hook)
    mean = mean.float().numpy()
    _check_finite(mean, t, "model mean")
    z = _draw(p_streams, x.shape[1:])
    return (mean + np.float32(np.sqrt(sched.posterior_var[t])) * z).astype(np.float32)


def _q_sample(x0: np.ndarray, t: int, sched: NoiseSchedule, streams) -> np.ndarray:
    if t == 0:
        return x0.copy()
    ab = sched.alpha_bar[t]
    z = _draw(streams, x0.shape[1:])
    return (np.float32(np.sqrt(ab)) * x0 + np.float32(np.sqrt(1.0 - ab)) * z).astype(np.float32)


def _renoise(x: np.ndarray, t: int, sched: NoiseSchedule, streams) -> np.ndarray:
    a = sched.alpha[t]
    z = _draw(streams, x.shape[1:])
    return (np.float32(np.sqrt(a)) * x + np.float32(np.sqrt(1.0 - a)) * z).astype(np.float32)


def _stream_sets(rngs: Sequence[SeededRng]):
    return [[r.stream(k) for r in rngs] for k in range(4)]


def inpaint_batch(x0, m, model, sched: NoiseSchedule, cfg: SamplerConfig,
                  rngs: Sequence[SeededRng], trace: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Inpaint a batch [B,C,H,W] with keep-masks [B,1,H,W] (1 = observed pixel).

    Only ``x0 * m`` is ever read, so hidden pixels of ``x0`` cannot leak in.
    """
    cfg.validate(sched)
    x0 = np.asarray(x0, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    if x0.ndim != 4 or m.ndim != 4 or m.shape[1] != 1 or m.shape[0] != x0.shape[0] \
            or m.shape[2:] != x0.shape[2:]:
        raise DomainError(f"image batch {x0.shape} and mask batch {m.shape} do not align")
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("mask must be binary")
    if len(rngs) != x0.shape[0]:
        raise DomainError("need one rng per batch item")
    keep = np.broadcast_to(m, x0.shape)
    known = np.where(keep == 1, x0, np.float32(0))
    p, q, c, r = _stream_sets(rngs)
    dtype = _model_dtype(model)

    hook_masks = None
    if cfg.conditioned:
        pyramids = [MaskPyramid.build(mi, model.tap_extents()) for mi in m]
        hook_masks = {name: torch.as_tensor(np.stack([pm.levels[name] for pm in pyramids]))
                      for name in model.tap_extents()}

    x = _draw(p, x0.shape[1:])
    for t in range(sched.T, 0, -1):
        for j in range(1 + cfg.resample_jumps):
            hook = None
            if cfg.conditioned:
                x_in = _q_sample(known, t, sched, c)
                if cfg.cond_fill == "xt":
                    x_in = np.where(keep == 1, x_in, x)
                with torch.no_grad():
                    _, pyr = model(torch.as_tensor(x_in, dtype=dtype), torch.full((x.shape[0],), t))
                hook = LatentConditioner(pyr.taps, hook_masks, model.ep, lsc=cfg.lsc,
                                         ep_taps=cfg.ep_taps, kernel_blend=cfg.kernel_blend,
                                         kernel_cfg=cfg.kernel)
            x_infr = _p_sample(model, x, t, sched, p, hook)
            x_cond = _q_sample(known, t - 1, sched, q)
            x_prev = np.where(keep == 1, x_cond, x_infr)
            _check_finite(x_prev, t, "sample")
            if j < cfg.resample_jumps:
                x = _renoise(x_prev, t, sched, r)
        x = x_prev
        if trace is not None:
            trace(t - 1, x)
    return x


def inpaint(x0, m, params, sched: NoiseSchedule, cfg: SamplerConfig, rng: SeededRng,
            trace: Callable[[int, np.ndarray], None] | None = None) -> Grid:
    """Inpaint one [C,H,W] image given its keep-mask [1,H,W] (1 = observed)."""
    x0 = np.asarray(x0, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    if m.ndim == 2:
        m = m[None]
    if x0.ndim != 3 or m.shape != (1,) + x0.shape[1:]:
        raise DomainError(f"image {x0.shape} and mask {m.shape} extents differ")
    wrapped = None if trace is None else (lambda t, xb: trace(t, xb[0]))
    return as_grid(inpaint_batch(x0[None], m[None], params, sched, cfg, [rng], wrapped)[0])


def sample_unconditional_batch(params, sched: NoiseSchedule, shape, rngs: Sequence[SeededRng]) -> np.ndarray:
    p = [r.stream(P_STREAM) for r in rngs]
    x = _draw(p, tuple(shape))
    for t in range(sched.T, 0, -1):
        x = _p_sample(params, x, t, sched, p)
        _check_finite(x, t, "sample")
    return x


def sample_unconditional(params, sched: NoiseSchedule, shape, rng: SeededRng) -> Grid:
    """Ancestral sampling from N(0, I) through every reverse step."""
    return as_grid(sample_unconditional_batch(params, sched, shape, [rng])[0])
