"""Training loop for the denoiser under the kernel-weighted posterior-matching objective."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint
from .conditioning import LatentConditioner, MaskPyramid
from .denoiser import EP_TAP_ORDER, ModelConfig, TPTDenoiser
from .errors import ConfigError, DataError, DivergenceError, DomainError
from .grid import SeededRng
from .kernel import KernelConfig, kernel_weighted_loss
from .masks import AugmentFlags, augment, sample_training_mask, validate_ratio_range
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
PAPER_LR_PEAK = 5e-5
PAPER_BATCH_SIZE = 16
PAPER_TOTAL_ITERS = 250_000
PAPER_MASK_RATIO = (0.30, 0.50)


@dataclass
class TrainConfig:
    batch_size: int = PAPER_BATCH_SIZE
    total_iters: int = 2000
    lr_peak: float = PAPER_LR_PEAK
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    mask_ratio_lo: float = PAPER_MASK_RATIO[0]
    mask_ratio_hi: float = PAPER_MASK_RATIO[1]
    flip_h: bool = True
    flip_v: bool = True
    rot90: bool = True
    seed: int = 0
    # share of each batch trained through the conditioning hook (trains the EP mixers)
    cond_fraction: float = 0.5
    kernel_blend: bool = True
    # samples per batch that also get the t = 1 decoder term
    recon_samples: int = 4
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def validate(self):
        validate_ratio_range(self.mask_ratio_lo, self.mask_ratio_hi)
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ConfigError("batch_size and total_iters must be positive")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError("optimizer must be 'adamw' or 'adam'")
        if not 0.0 <= self.cond_fraction <= 1.0:
            raise ConfigError("cond_fraction must be in [0, 1]")
        if self.recon_samples < 0 or self.lr_peak <= 0:
            raise ConfigError("recon_samples must be >= 0 and lr_peak > 0")
        self.kernel.validate()

    @property
    def augment_flags(self) -> AugmentFlags:
        return AugmentFlags(self.flip_h, self.flip_v, self.rot90)

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_fraction * self.total_iters))


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak`` then cosine decay to 0 at the final iteration."""
    if not 0 <= it < cfg.total_iters:
        raise DomainError(f"iteration {it} outside [0, {cfg.total_iters})")
    w = cfg.warmup_iters
    if it < w:
        return cfg.lr_peak * it / w
    span = cfg.total_iters - 1 - w
    progress = 1.0 if span <= 0 else (it - w) / span
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_model(cfg: ModelConfig, seed: int) -> TPTDenoiser:
    torch.manual_seed(seed)
    return TPTDenoiser(cfg)


def make_optimizer(model: TPTDenoiser, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr_peak)
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr_peak, weight_decay=cfg.weight_decay)


@dataclass
class Batch:
    x0: np.ndarray
    xt: np.ndarray
    t: np.ndarray
    indices: np.ndarray
    cond_x: np.ndarray  # q-sample of x0 * m feeding the conditioning pass, conditioned rows only
    keep: np.ndarray  # [n_cond, 1, H, W] keep-masks
    n_cond: int


def draw_batch(images: np.ndarray, cfg: TrainConfig, sched: NoiseSchedule, rng: SeededRng) -> Batch:
    """Everything random about one iteration, drawn from ``rng`` in a fixed order."""
    B = cfg.batch_size
    idx = rng.stream(0).integers(0, images.shape[0], B)
    n_cond = int(round(cfg.cond_fraction * B))
    x0, xt, ts, cond_x, keep = [], [], [], [], []
    for b in range(B):
        r = rng.stream(1 + b)
        img = augment(images[idx[b]], cfg.augment_flags, r.stream(0))
        t = int(r.stream(1).integers(2, sched.T + 1))
        ab = sched.alpha_bar[t]
        noisy = np.float32(np.sqrt(ab)) * img + np.float32(np.sqrt(1 - ab)) * r.stream(2).normal(img.shape)
        hole = sample_training_mask(img.shape, (cfg.mask_ratio_lo, cfg.mask_ratio_hi), r.stream(3))
        x0.append(img)
        xt.append(noisy)
        ts.append(t)
        if b < n_cond:
            m = 1.0 - hole
            # q-sample of the observed part only, as at inference
            z = r.stream(4).normal(img.shape)
            cond_x.append(np.float32(np.sqrt(ab)) * (img * m) + np.float32(np.sqrt(1 - ab)) * z)
            keep.append(m)
    H, W = images.shape[-2:]
    return Batch(np.stack(x0), np.stack(xt).astype(np.float32), np.array(ts), idx,
                 np.stack(cond_x) if cond_x else np.zeros((0,) + images.shape[1:], np.float32),
                 np.stack(keep).astype(np.float32) if keep else np.zeros((0, 1, H, W), np.float32), n_cond)


def _predictor(model: TPTDenoiser, batch: Batch, cfg: TrainConfig):
    n = batch.n_cond
    hook = None
    if n:
        with torch.no_grad():
            _, pyr = model(torch.as_tensor(batch.cond_x), torch.as_tensor(batch.t[:n]))
        ext = model.tap_extents()
        pyramids = [MaskPyramid.build(k, ext) for k in batch.keep]
        masks = {name: torch.as_tensor(np.stack([p.levels[name] for p in pyramids])) for name in ext}
        hook = LatentConditioner(pyr.taps, masks, model.ep, lsc=True, ep_taps=EP_TAP_ORDER,
                                 kernel_blend=cfg.kernel_blend, kernel_cfg=cfg.kernel)

    def predict(xt: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        parts = []
        if n:
            parts.append(model(xt[:n], t[:n], hook)[0])
        if n < xt.shape[0]:
            parts.append(model(xt[n:], t[n:])[0])
        return torch.cat(parts)

    return predict


def recon_term(model: TPTDenoiser, batch: Batch, sched: NoiseSchedule, count: int, rng: SeededRng) -> torch.Tensor:
    """Gaussian-decoder term -log p(x0 | x1) (up to a constant), scaled to one ELBO step."""
    x0 = batch.x0[:count]
    ab = sched.alpha_bar[1]
    x1 = np.float32(np.sqrt(ab)) * x0 + np.float32(np.sqrt(1 - ab)) * rng.normal(x0.shape)
    mean, _ = model(torch.as_tensor(x1), torch.ones(count, dtype=torch.long))
    err = ((mean - torch.as_tensor(x0)) ** 2).flatten(1).sum(dim=1) / (2.0 * sched.beta[1])
    return err.mean() / (sched.T - 1)


def train_step(model, opt, images, cfg: TrainConfig, sched: NoiseSchedule, it: int, rng: SeededRng) -> float:
    r = rng.stream(it)
    batch = draw_batch(images, cfg, sched, r)
    for g in opt.param_groups:
        g["lr"] = lr_at(it, cfg)
    loss = kernel_weighted_loss(batch.x0, batch.xt, batch.t, _predictor(model, batch, cfg), sched, cfg.kernel)
    if cfg.recon_samples:
        loss = loss + recon_term(model, batch, sched, min(cfg.recon_samples, cfg.batch_size), r.stream(10_000))
    value = float(loss.detach())
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss {value} at iteration {it}", it)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return value


def train(images, cfg: TrainConfig, sched: NoiseSchedule, model: TPTDenoiser, rng: SeededRng | None = None,
          start_iter: int = 0, opt: torch.optim.Optimizer | None = None,
          callback: Callable[[int, float], None] | None = None):
    """Run iterations ``start_iter .. total_iters-1``; returns (model, [(iteration, loss), ...]).

    Iteration ``i`` draws from ``rng.stream(i)``, so a resumed run consumes the same
    randomness as an uninterrupted one.
    """
    cfg.validate()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DataError("training set must be a nonempty [N,C,H,W] array")
    rng = rng or SeededRng(cfg.seed)
    opt = opt or make_optimizer(model, cfg)
    model.train()
    history = []
    for it in range(start_iter, cfg.total_iters):
        value = train_step(model, opt, images, cfg, sched, it, rng)
        history.append((it, value))
        if callback is not None:
            callback(it, value)
    model.eval()
    return model, history


def write_loss_table(history, path) -> None:
    lines = ["iteration\tloss\n"] + [f"{i}\t{v!r}\n" for i, v in history]
    checkpoint.atomic_write(path, "".join(lines).encode("utf-8"))


def read_loss_table(path) -> list[tuple[int, float]]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [(int(a), float(b)) for a, b in (r.split("\t") for r in rows if r)]


# checkpoint <-> model/optimizer

def model_records(model: TPTDenoiser) -> "OrderedDict[str, np.ndarray]":
    c = model.cfg
    rec = OrderedDict()
    rec["arch.in_channels"] = np.array([c.in_channels], np.float32)
    rec["arch.image_size"] = np.array([c.image_size], np.float32)
    rec["arch.channels"] = np.array(c.channels, np.float32)
    rec["arch.ff_mult"] = np.array([c.ff_mult], np.float32)
    rec["arch.temb_dim"] = np.array([c.temb_dim], np.float32)
    rec["arch.ep_hidden"] = np.array([c.ep_hidden], np.float32)
    for name, tensor in model.state_dict().items():
        rec[f"param.{name}"] = tensor.detach().float().numpy()
    return rec


def save_checkpoint(path, model: TPTDenoiser, opt: torch.optim.Optimizer | None = None, iteration: int = 0) -> None:
    rec = model_records(model)
    rec["meta.iteration"] = np.array([iteration], np.float32)
    if opt is not None:
        names = [n for n, _ in model.named_parameters()]
        for name, p in zip(names, model.parameters()):
            st = opt.state.get(p)
            if st:
                rec[f"opt.step.{name}"] = np.array([float(st["step"])], np.float32)
                rec[f"opt.exp_avg.{name}"] = st["exp_avg"].numpy()
                rec[f"opt.exp_avg_sq.{name}"] = st["exp_avg_sq"].numpy()
    checkpoint.save(path, rec)


def model_config_from_records(rec) -> ModelConfig:
    try:
        return ModelConfig(
            in_channels=int(rec["arch.in_channels"][0]),
            image_size=int(rec["arch.image_size"][0]),
            channels=tuple(int(v) for v in rec["arch.channels"]),
            ff_mult=int(rec["arch.ff_mult"][0]),
            temb_dim=int(rec["arch.temb_dim"][0]),
            ep_hidden=int(rec["arch.ep_hidden"][0]),
        )
    except KeyError as exc:
        raise DataError(f"checkpoint lacks architecture record {exc}") from exc


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Return (model, optimizer or None, iteration) rebuilt from a checkpoint file."""
    rec = checkpoint.load(path)
    model = TPTDenoiser(model_config_from_records(rec))
    state = {k[len("param."):]: torch.from_numpy(v.copy()) for k, v in rec.items() if k.startswith("param.")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise DataError(f"checkpoint misses parameters {sorted(missing)[:3]}")
    model.load_state_dict(state)
    model.eval()
    iteration = int(rec.get("meta.iteration", np.zeros(1))[0])
    opt = None
    if cfg is not None:
        opt = make_optimizer(model, cfg)
        for name, p in model.named_parameters():
            if f"opt.exp_avg.{name}" in rec:
                opt.state[p] = {
                    "step": torch.tensor(float(rec[f"opt.step.{name}"][0])),
                    "exp_avg": torch.from_numpy(rec[f"opt.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(rec[f"opt.exp_avg_sq.{name}"].copy()),
                }
    return model, opt, iteration
