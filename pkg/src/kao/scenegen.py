"""Procedural satellite-like scenes: road networks over textured ground, and striped field mosaics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .grid import Grid, SeededRng, as_grid
from .imageio import read_image, read_mask, write_image, write_mask
from .masks import sample_training_mask

KINDS = ("roads", "fields")
ROAD_LEVEL = 0.9
BOUNDARY_LEVEL = -0.6
FIELD_FLOOR = -0.4
_CHANNEL_GAINS = (1.0, 0.9, 0.8)


@dataclass
class SceneSpec:
    kind: str = "roads"
    size: int = 32
    channels: int = 1
    road_width: float = 2.0
    road_count: int = 2
    plot_count: int = 5
    noise_amplitude: float = 0.25

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"scene kind must be one of {KINDS}, got {self.kind!r}")
        if self.size < 16:
            raise ConfigError(f"scene extents must be >= 16, got {self.size}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.road_count < 1 or self.plot_count < 1 or self.road_width <= 0:
            raise ConfigError("road_count, plot_count and road_width must be positive")


def _smooth_noise(rng: SeededRng, n: int, scale: float) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.normal((n, n)).astype(np.float64), scale, mode="wrap")
    return (z - z.mean()) / (z.std() + 1e-12)


def _edge_point(rng: SeededRng, n: int) -> np.ndarray:
    side = int(rng.integers(0, 4))
    u = float(rng.uniform(0, n - 1))
    return np.array([(u, 0.0), (u, n - 1.0), (0.0, u), (n - 1.0, u)][side])


def _segment_distance(px, py, a, b) -> np.ndarray:
    d = b - a
    L2 = float(d @ d)
    if L2 == 0:
        return np.hypot(px - a[0], py - a[1])
    s = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(px - (a[0] + s * d[0]), py - (a[1] + s * d[1]))


def _roads(spec: SceneSpec, rng: SeededRng) -> np.ndarray:
    n = spec.size
    img = np.clip(-0.4 + spec.noise_amplitude * _smooth_noise(rng, n, 2.0), -0.9, 0.3)
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    road = np.zeros((n, n), dtype=bool)
    for _ in range(spec.road_count):
        pts = [_edge_point(rng, n)]
        for _ in range(int(rng.integers(0, 3))):
            pts.append(rng.uniform(n * 0.2, n * 0.8, 2))
        pts.append(_edge_point(rng, n))
        for a, b in zip(pts[:-1], pts[1:]):
            road |= _segment_distance(px, py, a, b) <= spec.road_width / 2.0
    img[road] = ROAD_LEVEL
    return img


def _voronoi_seeds(spec: SceneSpec, rng: SeededRng) -> np.ndarray:
    n, k = spec.size, spec.plot_count
    min_sep = 0.7 * n / np.sqrt(k)
    seeds: list = []
    for _ in range(10000):
        if len(seeds) == k:
            break
        p = rng.integers(0, n, 2)
        if all(np.hypot(*(p - q)) >= min_sep for q in seeds):
            seeds.append(p)
        else:
            min_sep *= 0.999
    return np.array(seeds, dtype=np.float64)


def field_labels(spec: SceneSpec, rng: SeededRng) -> np.ndarray:
    n = spec.size
    seeds = _voronoi_seeds(spec, rng)
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    d = (px[None] - seeds[:, 1, None, None]) ** 2 + (py[None] - seeds[:, 0, None, None]) ** 2
    return d.argmin(axis=0)


def _boundaries(labels: np.ndarray) -> np.ndarray:
    # mark a pixel when its right or lower neighbour belongs to another plot
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b


def _fields(spec: SceneSpec, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    n = spec.size
    for _ in range(100):
        labels = field_labels(spec, rng)
        border = _boundaries(labels)
        _, count = ndimage.label(~border)
        if count == spec.plot_count and len(np.unique(labels)) == spec.plot_count:
            break
    else:
        raise DataError(f"could not lay out {spec.plot_count} separable plots on {n}x{n}")
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    for k in range(spec.plot_count):
        base = rng.uniform(-0.1, 0.6)
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(6.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = np.sin(2 * np.pi * (px * np.cos(theta) + py * np.sin(theta)) / period + phase)
        sel = labels == k
        img[sel] = base + 0.12 * stripes[sel]
    img += 0.2 * spec.noise_amplitude * _smooth_noise(rng, n, 1.0)
    img = np.clip(img, FIELD_FLOOR, 1.0)
    img[border] = BOUNDARY_LEVEL
    return img, labels


def _to_channels(img: np.ndarray, channels: int) -> Grid:
    if channels == 1:
        return as_grid(img[None])
    return as_grid(np.stack([g * img for g in _CHANNEL_GAINS]))


def generate_scene_with_labels(spec: SceneSpec, rng: SeededRng):
    spec.validate()
    if spec.kind == "roads":
        img = _roads(spec, rng)
        labels = None
    else:
        img, labels = _fields(spec, rng)
    return _to_channels(img, spec.channels), labels


def generate_scene(spec: SceneSpec, rng: SeededRng) -> Grid:
    """One [C, size, size] scene in [-1, 1]; deterministic for a given rng seed."""
    return generate_scene_with_labels(spec, rng)[0]


def generate_eval_pair(spec: SceneSpec, ratio: float, rng: SeededRng) -> tuple[Grid, Grid]:
    """A scene and its keep-mask ``m`` (1 = observed) whose hole covers ``ratio`` of the pixels."""
    image = generate_scene(spec, rng.stream(0))
    hole = sample_training_mask(image.shape, (ratio, ratio), rng.stream(1))
    return image, as_grid(1.0 - hole)


def scene_kind(kind: str, index: int) -> str:
    if kind == "mixed":
        return KINDS[index % 2]
    if kind not in KINDS:
        raise ConfigError(f"scene kind must be one of {KINDS} or 'mixed', got {kind!r}")
    return kind


def write_dataset(out_dir, spec: SceneSpec, count: int, seed: int, kind: str = "roads",
                  mask_ratio: float | None = None) -> list[str]:
    """Write ``count`` scenes (and keep-masks when ``mask_ratio`` is set) plus ``manifest.txt``.

    The manifest holds one ``filename<TAB>seed<TAB>kind`` row per scene. Masks are
    stored next to their scene as ``<stem>_mask.pgm``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    ext = "pgm" if spec.channels == 1 else "ppm"
    rows = []
    master = SeededRng(seed)
    for i in range(count):
        item_kind = scene_kind(kind, i)
        item_spec = SceneSpec(**{**spec.__dict__, "kind": item_kind})
        item_seed = int(master.stream(i).integers(0, 2**63))
        name = f"scene_{i:05d}.{ext}"
        rng = SeededRng(item_seed)
        if mask_ratio is None:
            write_image(generate_scene(item_spec, rng), out / name)
        else:
            image, m = generate_eval_pair(item_spec, mask_ratio, rng)
            write_image(image, out / name)
            write_mask(m, out / f"scene_{i:05d}_mask.pgm")
        rows.append(f"{name}\t{item_seed}\t{item_kind}\n")
    (out / "manifest.txt").write_text("".join(rows), encoding="utf-8")
    return [r.split("\t")[0] for r in rows]


def read_manifest(data_dir) -> list[tuple[str, int, str]]:
    path = Path(data_dir) / "manifest.txt"
    if not path.exists():
        raise DataError(f"no manifest.txt in {data_dir}")
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            name, seed, kind = line.split("\t")
            rows.append((name, int(seed), kind))
    if not rows:
        raise DataError(f"dataset {data_dir} is empty")
    return rows


def load_dataset(data_dir, with_masks: bool = False):
    """Stack the manifest's images into [N,C,H,W]; optionally also the [N,1,H,W] keep-masks."""
    rows = read_manifest(data_dir)
    images = np.stack([read_image(Path(data_dir) / name) for name, _, _ in rows])
    if not with_masks:
        return images
    masks = np.stack([read_mask(Path(data_dir) / (Path(name).stem + "_mask.pgm")) for name, _, _ in rows])
    return images, masks
