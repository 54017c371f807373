"""A miniature token-pyramid transformer that predicts the reverse-step mean.

Level ``l`` holds tokens of width ``channels[l]`` on a grid of ``size / 2**l``.
Latents are exposed at named taps (``enc0``..``enc{L-1}`` and ``mid``); a hook
passed to :meth:`TPTDenoiser.forward` may replace each tap latent before the
downstream layers (and the decoder skips) consume it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import EPMixer
from .errors import ConfigError, DomainError

Hook = Callable[[str, torch.Tensor], torch.Tensor]

EP_TAP_ORDER = ("enc0", "mid")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).reshape(-1, 1) * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def embed_timestep(t: int, dim: int, T: int | None = None) -> np.ndarray:
    """Sinusoidal embedding of step ``t`` as a float32 vector of length ``dim``."""
    if t < 1 or (T is not None and t > T):
        raise DomainError(f"step {t} out of range")
    return timestep_embedding(torch.tensor([t]), dim)[0].numpy().astype(np.float32)


class AttentionBlock(nn.Module):
    """Pre-norm single-head self-attention and a GELU feedforward, both residual."""

    def __init__(self, dim: int, ff_mult: int = 4):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_mult * dim)
        self.ff2 = nn.Linear(ff_mult * dim, dim)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(x)
        q, k, v = (lin(y).unsqueeze(1) for lin in (self.q, self.k, self.v))
        # softmax(q k^T / sqrt(d)) v, fused kernel
        return self.proj(F.scaled_dot_product_attention(q, k, v).squeeze(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, N, C]
        x = x + self.attend(x)
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


def attention_block(tokens: torch.Tensor, block: AttentionBlock) -> torch.Tensor:
    """Apply ``block`` to a [B,C,h,w] (or [C,h,w]) level map, returning the same layout."""
    squeeze = tokens.dim() == 3
    if squeeze:
        tokens = tokens[None]
    B, C, h, w = tokens.shape
    if C != block.dim:
        raise DomainError(f"block width {block.dim} does not match {C} channels")
    seq = tokens.flatten(2).transpose(1, 2)
    out = block(seq).transpose(1, 2).reshape(B, C, h, w)
    return out[0] if squeeze else out


@dataclass
class TokenPyramid:
    levels: list
    mid: Optional[torch.Tensor] = None
    taps: dict = field(default_factory=dict)

    def shapes(self) -> list[tuple]:
        return [tuple(level.shape[-3:]) for level in self.levels]


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    image_size: int = 32
    channels: tuple = (8, 16, 32)
    ff_mult: int = 4
    temb_dim: int = 32
    ep_hidden: int = 2
    init_std: float = 0.02

    def validate(self):
        L = len(self.channels)
        if L < 1 or self.image_size % (2 ** (L - 1)):
            raise ConfigError(f"image size {self.image_size} not divisible by 2^{L - 1}")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")


class TPTDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = tuple(cfg.channels)
        L = len(ch)
        self.embed = nn.ModuleList(
            [nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)]
            + [nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1) for i in range(1, L)]
        )
        self.time_mlp = nn.Sequential(nn.Linear(cfg.temb_dim, 2 * cfg.temb_dim), nn.GELU(),
                                      nn.Linear(2 * cfg.temb_dim, 2 * cfg.temb_dim))
        self.time_proj = nn.ModuleList([nn.Linear(2 * cfg.temb_dim, c) for c in ch + (ch[-1],)])
        self.enc_blocks = nn.ModuleList([AttentionBlock(c, cfg.ff_mult) for c in ch])
        self.mid_block = AttentionBlock(ch[-1], cfg.ff_mult)
        self.up = nn.ModuleList([nn.Conv2d(ch[i + 1], ch[i], 3, padding=1) for i in range(L - 1)])
        self.fuse = nn.ModuleList([nn.Conv2d(ch[i], ch[i], 3, padding=1) for i in range(L - 1)])
        self.head = nn.Conv2d(ch[0] + cfg.in_channels, cfg.in_channels, 3, padding=1)
        # time-dependent gain on the x_t skip; the posterior mean is mostly c_t(t) * x_t
        self.skip_gain = nn.Linear(2 * cfg.temb_dim, cfg.in_channels)
        self.ep = nn.ModuleDict({
            "enc0": EPMixer(ch[0], cfg.ep_hidden),
            "mid": EPMixer(ch[-1], cfg.ep_hidden),
        })
        self._init_weights()
        self.forward_passes = 0
        frac = self.ep_fraction()
        if frac >= 0.01:
            raise ConfigError(f"EP mixer parameters are {frac:.2%} of the model (limit 1%)")

    def _init_weights(self):
        for name, mod in self.named_modules():
            if name.startswith("ep"):
                continue
            if isinstance(mod, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(mod.weight, std=self.cfg.init_std, a=-2 * self.cfg.init_std,
                                      b=2 * self.cfg.init_std)
                nn.init.zeros_(mod.bias)
        # conv stems need unit-scale activations; 0.02 would bury the signal
        for conv in list(self.embed) + list(self.up) + list(self.fuse):
            fan_in = conv.in_channels * 9
            nn.init.trunc_normal_(conv.weight, std=1 / math.sqrt(fan_in))
        for lin in (self.head, self.skip_gain):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def ep_fraction(self) -> float:
        ep = sum(p.numel() for p in self.ep.parameters())
        return ep / sum(p.numel() for p in self.parameters())

    def tap_extents(self) -> dict[str, tuple[int, int]]:
        s = self.cfg.image_size
        out = {f"enc{i}": (s >> i, s >> i) for i in range(len(self.cfg.channels))}
        out["mid"] = out[f"enc{len(self.cfg.channels) - 1}"]
        return out

    def forward(self, x: torch.Tensor, t: torch.Tensor, hook: Hook | None = None):
        """Return (mu_theta, TokenPyramid of pre-hook tap latents)."""
        c = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.in_channels, c.image_size, c.image_size):
            raise DomainError(f"expected input [B,{c.in_channels},{c.image_size},{c.image_size}], "
                              f"got {tuple(x.shape)}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        if bool((t < 1).any()):
            raise DomainError("timestep must be >= 1")
        self.forward_passes += 1
        temb = self.time_mlp(timestep_embedding(t, c.temb_dim).to(x.dtype))

        taps: dict[str, torch.Tensor] = {}
        skips = []
        h = x
        for i, (emb, block) in enumerate(zip(self.embed, self.enc_blocks)):
            h = emb(h) + self.time_proj[i](temb)[:, :, None, None]
            h = attention_block(h, block)
            name = f"enc{i}"
            taps[name] = h
            if hook is not None:
                h = hook(name, h)
            skips.append(h)

        L = len(c.channels)
        h = attention_block(h + self.time_proj[L](temb)[:, :, None, None], self.mid_block)
        taps["mid"] = h
        if hook is not None:
            h = hook("mid", h)

        for i in reversed(range(L - 1)):
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest")) + skips[i]
            h = h + self.fuse[i](F.gelu(h))
        mean = self.head(torch.cat([h, x], dim=1)) + self.skip_gain(temb)[:, :, None, None] * x
        pyramid = TokenPyramid([taps[f"enc{i}"] for i in range(L)], taps["mid"], taps)
        return mean, pyramid


def denoise_forward(xt, t: int, params: TPTDenoiser, hook: Hook | None = None, T: int | None = None):
    """Single-image convenience wrapper: numpy [C,H,W] in, numpy mean and pyramid out."""
    if T is not None and not 1 <= int(t) <= T:
        raise DomainError(f"step {t} outside [1, {T}]")
    x = torch.as_tensor(np.asarray(xt), dtype=next(params.parameters()).dtype)
    if x.dim() != 3:
        raise DomainError(f"expected a [C,H,W] grid, got shape {tuple(x.shape)}")
    with torch.no_grad():
        mean, pyr = params(x[None], torch.tensor([int(t)]), hook)
    levels = [lv[0].numpy().astype(np.float32) for lv in pyr.levels]
    out = TokenPyramid(levels, pyr.mid[0].numpy().astype(np.float32),
                       {k: v[0].numpy().astype(np.float32) for k, v in pyr.taps.items()})
    return mean[0].numpy().astype(np.float32), out


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()]).double().numpy()


def ep_taps_for(count: int) -> tuple[str, ...]:
    if not 0 <= count <= len(EP_TAP_ORDER):
        raise ConfigError(f"EP module count must be in 0..{len(EP_TAP_ORDER)}")
    return EP_TAP_ORDER[:count]
