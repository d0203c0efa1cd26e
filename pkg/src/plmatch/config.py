"""Flat run configuration: ``key = value`` files, ``--set key=value`` overrides,
JSON echo.  Unknown keys are rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import PIXEL_MEAN, PIXEL_STD, AugSamplerConfig, DataConfig
from .losses import LossConfig
from .model import ModelConfig
from .objective import MATCHERS


class ConfigError(ValueError):
    pass


# config-file spellings that are not valid Python identifiers
ALIASES = {"lambda": "lam"}
REVERSE_ALIASES = {v: k for k, v in ALIASES.items()}


@dataclass(frozen=True)
class RunConfig:
    # optimisation
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_m: float = 0.999
    tau: float = 0.2
    lam: float = 0.5
    matcher: str = "pl"
    symmetric: bool = False
    queue_size: int = 4096
    dense_queue_size: int = 4096
    checkpoint_every: int = 500
    # model
    g: int = 7
    out_size: int = 56
    d_backbone: int = 64
    d: int = 32
    d_g: int = 32
    # data
    n_images: int = 1024
    image_size: int = 64
    kmin: int = 5
    kmax: int = 30
    rmin: float = 1.5
    rmax: float = 3.5
    # augmentation
    scale_min: float = 0.2
    scale_max: float = 1.0
    aspect_min: float = 0.75
    aspect_max: float = 4 / 3
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0
    jitter_scale_min: float = 0.8
    jitter_scale_max: float = 1.2
    jitter_shift_min: float = -0.1
    jitter_shift_max: float = 0.1
    # evaluation
    eval_seed: int = 1
    probe_images: int = 256
    probe_ridge: float = 1e-3
    fidelity_pairs: int = 10000
    sweep_steps: int = 300

    def __post_init__(self):
        if self.matcher not in MATCHERS:
            raise ConfigError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        positive = ("steps", "batch_size", "queue_size", "dense_queue_size", "g", "out_size", "d_backbone", "d", "d_g", "n_images", "image_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("invalid optimiser settings")
        if not 0 <= self.ema_m < 1:
            raise ConfigError("ema_m must lie in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 <= self.lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.out_size % self.g:
            raise ConfigError("out_size must be divisible by g")
        if self.kmin < 0 or self.kmax < self.kmin:
            raise ConfigError("need 0 <= kmin <= kmax")

    def data(self) -> DataConfig:
        return DataConfig(height=self.image_size, width=self.image_size, kmin=self.kmin, kmax=self.kmax, rmin=self.rmin, rmax=self.rmax)

    def aug(self) -> AugSamplerConfig:
        try:
            return AugSamplerConfig(
                scale_range=(self.scale_min, self.scale_max),
                aspect_range=(self.aspect_min, self.aspect_max),
                hflip_prob=self.hflip_prob,
                vflip_prob=self.vflip_prob,
                jitter_scale=(self.jitter_scale_min, self.jitter_scale_max),
                jitter_shift=(self.jitter_shift_min, self.jitter_shift_max),
                out_size=self.out_size,
                g=self.g,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model(self) -> ModelConfig:
        return ModelConfig(
            out_size=self.out_size, g=self.g, d_backbone=self.d_backbone, d=self.d, d_g=self.d_g,
            input_mean=PIXEL_MEAN, input_std=PIXEL_STD,
        )

    def loss(self) -> LossConfig:
        return LossConfig(tau=self.tau, lam=self.lam)

    def to_dict(self) -> dict:
        return {REVERSE_ALIASES.get(k, k): v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_overrides(self, **kv) -> "RunConfig":
        return replace(self, **kv)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw):
    default = getattr(RunConfig, name)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return str(raw).strip()


def _canonical(key: str) -> str:
    key = key.strip().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def parse_pairs(pairs: dict) -> dict:
    return {_canonical(k): _coerce(_canonical(k), v) for k, v in pairs.items()}


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return parse_pairs(out)


def parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return parse_pairs(out)


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults <- file (flat ``key = value`` or the JSON echo) <- overrides."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        if path.suffix == ".json":
            try:
                values.update(parse_pairs(json.loads(text)))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        else:
            values.update(parse_text(text))
    values.update(parse_set(overrides))
    return RunConfig(**values)
