"""Flat ``key = value`` run configuration shared by every CLI verb.

Lines are UTF-8, ``#`` starts a comment, keys are dotted (``train.batch_size``).
Unknown keys are rejected. :meth:`RunConfig.resolved_text` echoes every key, with
values taken verbatim from the source text where one was given.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

from .denoiser import ModelConfig
from .errors import ConfigError
from .kernel import KernelConfig
from .sampler import SamplerConfig
from .scenegen import SceneSpec
from .schedule import NoiseSchedule, build_schedule
from .trainer import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda s: None if s.strip() == "" else parse(s)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]


def _dataclass_keys(prefix: str, cls, skip=()) -> dict[str, Key]:
    out = {}
    inst = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(inst, f.name)
        if isinstance(default, bool):
            parse = _parse_bool
        elif isinstance(default, int):
            parse = int
        elif isinstance(default, float):
            parse = float
        elif isinstance(default, tuple):
            parse = _parse_ints
        else:
            parse = str
        out[f"{prefix}.{f.name}"] = Key(default, parse)
    return out


def _schema() -> dict[str, Key]:
    keys: dict[str, Key] = {
        "seed": Key(0, int),
        "schedule.T": Key(1000, int),
        "schedule.beta_start": Key(1e-4, float),
        "schedule.beta_end": Key(0.02, float),
    }
    keys.update(_dataclass_keys("model", ModelConfig))
    keys.update(_dataclass_keys("kernel", KernelConfig))
    keys.update(_dataclass_keys("train", TrainConfig, skip=("seed", "kernel")))
    keys["train.resume"] = Key("", str)
    keys.update(_dataclass_keys("sampler", SamplerConfig, skip=("T", "seed", "kernel")))
    keys["sampler.trace_every"] = Key(0, int)
    keys.update({
        "data.kind": Key("mixed", str),
        "data.count": Key(200, int),
        "data.mask_ratio": Key(None, _optional(float)),
    })
    keys.update(_dataclass_keys("data", SceneSpec, skip=("kind",)))
    keys.update({
        "eval.batch_size": Key(32, int),
        "eval.ssim_window": Key(7, int),
        "paths.data": Key("data/train", str),
        "paths.eval_data": Key("data/eval", str),
        "paths.checkpoint": Key("runs/train/model.ckpt", str),
        "paths.out": Key("runs/out", str),
    })
    return keys


SCHEMA = _schema()


class RunConfig:
    def __init__(self, raw: dict[str, str] | None = None):
        self.raw: dict[str, str] = {}
        self.values: dict[str, Any] = {k: v.default for k, v in SCHEMA.items()}
        for k, v in (raw or {}).items():
            self.set(k, v)

    def set(self, key: str, text: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = SCHEMA[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
        self.raw[key] = text

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        raw: dict[str, str] = {}
        for n, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, value = (p.strip() for p in body.split("=", 1))
            if key in raw:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            raw[key] = value
        return cls(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def resolved_text(self) -> str:
        lines = ["# resolved configuration\n"]
        for key in SCHEMA:
            value = self.raw[key] if key in self.raw else _fmt(self.values[key])
            lines.append(f"{key} = {value}\n")
        return "".join(lines)

    # typed views

    def _section(self, prefix: str, cls, **extra):
        kw = {f.name: self.values[f"{prefix}.{f.name}"] for f in fields(cls)
              if f"{prefix}.{f.name}" in SCHEMA}
        kw.update(extra)
        try:
            obj = cls(**kw)
            if hasattr(obj, "validate"):
                obj.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return obj

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])

    def kernel_config(self) -> KernelConfig:
        return self._section("kernel", KernelConfig)

    def model_config(self) -> ModelConfig:
        return self._section("model", ModelConfig)

    def train_config(self) -> TrainConfig:
        return self._section("train", TrainConfig, seed=self["seed"], kernel=self.kernel_config())

    def sampler_config(self) -> SamplerConfig:
        return self._section("sampler", SamplerConfig, seed=self["seed"], kernel=self.kernel_config())

    def scene_spec(self) -> SceneSpec:
        kind = self["data.kind"]
        if kind not in ("roads", "fields", "mixed"):
            raise ConfigError(f"data.kind must be roads, fields or mixed, got {kind!r}")
        return self._section("data", SceneSpec, kind="roads" if kind == "mixed" else kind)
