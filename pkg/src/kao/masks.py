"""Random occlusion masks and geometric augmentation for training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grid import Grid, SeededRng, as_grid

COVERAGE_TOL = 0.02


def validate_ratio_range(lo: float, hi: float) -> None:
    if not (0.0 < lo <= hi < 1.0):
        raise ConfigError(f"mask ratio range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]")


@dataclass
class MaskMeta:
    target: float
    coverage: float
    rectangles: int
    pixel_fill: bool


def sample_training_mask(extents, ratio_range, rng: SeededRng, max_attempts: int = 200,
                         return_meta: bool = False):
    """Occlusion mask (1 = missing) covering a uniform-random fraction of ``ratio_range``.

    Random rectangles are added until the covered fraction is within 0.02 of the
    target. If that fails within ``max_attempts`` rectangles, random pixels are
    toggled to hit the target count exactly and ``pixel_fill`` is set in the metadata.
    """
    lo, hi = float(ratio_range[0]), float(ratio_range[1])
    validate_ratio_range(lo, hi)
    H, W = int(extents[-2]), int(extents[-1])
    n = H * W
    target = float(rng.uniform(lo, hi))
    mask = np.zeros((H, W), dtype=bool)
    rects = 0
    done = False
    for _ in range(max_attempts):
        need = target * n - mask.sum()
        # rectangle area scaled to what is still missing, at least one pixel
        side = max(1.0, np.sqrt(max(need, 1.0)))
        h = int(np.clip(rng.integers(1, int(np.ceil(side * 1.5)) + 1), 1, H))
        w = int(np.clip(rng.integers(1, int(np.ceil(side * 1.5)) + 1), 1, W))
        y = int(rng.integers(0, H - h + 1))
        x = int(rng.integers(0, W - w + 1))
        trial = mask.copy()
        trial[y:y + h, x:x + w] = True
        cov = trial.mean()
        if cov > target + COVERAGE_TOL:
            continue
        mask = trial
        rects += 1
        if abs(cov - target) <= COVERAGE_TOL:
            done = True
            break
    pixel_fill = False
    if not done:
        pixel_fill = True
        want = int(round(target * n))
        flat = mask.reshape(-1)
        have = int(flat.sum())
        if have < want:
            idx = np.flatnonzero(~flat)
            flat[rng.permutation(idx)[: want - have]] = True
        elif have > want:
            idx = np.flatnonzero(flat)
            flat[rng.permutation(idx)[: have - want]] = False
    out = as_grid(mask[None])
    if return_meta:
        return out, MaskMeta(target, float(mask.mean()), rects, pixel_fill)
    return out


@dataclass
class AugmentFlags:
    flip_h: bool = True
    flip_v: bool = True
    rot90: bool = True


def apply_augmentation(image, flip_h: bool = False, flip_v: bool = False, k: int = 0) -> Grid:
    """Deterministic flips then ``k`` counter-clockwise quarter turns of a [C,H,W] image."""
    img = np.asarray(image)
    if k % 4 and img.shape[-1] != img.shape[-2]:
        raise ConfigError("rot90 augmentation needs square images")
    if flip_h:
        img = img[..., ::-1]
    if flip_v:
        img = img[..., ::-1, :]
    if k % 4:
        img = np.rot90(img, k % 4, axes=(-2, -1))
    return as_grid(img)


def augment(image, flags: AugmentFlags, rng: SeededRng) -> Grid:
    """Independent coin flips for each flip and a uniform quarter-turn count."""
    if flags.rot90 and np.shape(image)[-1] != np.shape(image)[-2]:
        raise ConfigError("rot90 augmentation needs square images")
    fh = bool(rng.random() < 0.5)
    fv = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    return apply_augmentation(image, fh and flags.flip_h, fv and flags.flip_v, k if flags.rot90 else 0)
