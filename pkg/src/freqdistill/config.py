"""Experiment configuration: one flat, validated record shared by every subcommand.

JSON schema (all keys optional; unknown keys are rejected)::

    data_seed, height, width, classes, n_train, n_val     dataset
    teacher_width, student_width                           models
    transform, wavelet, level                              band decomposition
    principles, lam, prompt_init_scale                     stage one
    mu, band_subset, mask_mode, gate_norm                  stage two
    seeds, teacher_seed                                    seeds
    teacher_epochs, prompt_epochs, distill_epochs          epochs per stage
    teacher_lr, prompt_lr, distill_lr                      learning rates
    batch_size, momentum, weight_decay, clip_norm          optimizer
    variants, workers                                      ablation grid
    out                                                    output directory
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import GATE_NORMS, MASK_MODES, TRANSFORMS, ConfigError
from .freqxform import WAVELETS
from .prompt import BAND_SUBSETS

# name -> (transform, mask_mode, band_subset)
VARIANTS: dict[str, tuple[str, str, str]] = {}
for _t in TRANSFORMS:
    VARIANTS[f"{_t}-mask-all"] = (_t, "on", "all")
    VARIANTS[f"{_t}-nomask-all"] = (_t, "off", "all")
    VARIANTS[f"{_t}-mask-high"] = (_t, "on", "high")
    VARIANTS[f"{_t}-mask-low"] = (_t, "on", "low")
    VARIANTS[f"{_t}-nomask-high"] = (_t, "off", "high")
    VARIANTS[f"{_t}-nomask-low"] = (_t, "off", "low")
DEFAULT_VARIANTS = [f"{t}-{m}" for t in TRANSFORMS for m in ("mask-all", "nomask-all", "mask-high", "mask-low")]


@dataclass
class ExperimentConfig:
    data_seed: int = 0
    height: int = 64
    width: int = 64
    classes: int = 4
    n_train: int = 2000
    n_val: int = 500
    teacher_width: int = 32
    student_width: int = 8
    transform: str = "dwt"
    wavelet: str = "haar"
    level: int = 3
    principles: int = 2
    lam: float = 1.0
    prompt_init_scale: float = 1e-2
    mu: float = 5.0
    band_subset: str = "all"
    mask_mode: str = "on"
    gate_norm: str = "mean"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teacher_seed: int = 0
    teacher_epochs: int = 20
    prompt_epochs: int = 2
    distill_epochs: int = 20
    teacher_lr: float = 0.05
    prompt_lr: float = 0.02
    distill_lr: float = 0.05
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0
    variants: list[str] = field(default_factory=lambda: list(DEFAULT_VARIANTS))
    workers: int = 1
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _require(isinstance(self.seeds, list) and self.seeds and all(_is_int(s) for s in self.seeds),
                 "seeds must be a non-empty list of integers")
        for name in ("data_seed", "teacher_seed"):
            _require(_is_int(getattr(self, name)), f"{name} must be an integer")
        for name in ("height", "width", "classes", "n_train", "n_val", "teacher_width", "student_width",
                     "level", "principles", "batch_size", "workers"):
            _require(_is_int(getattr(self, name)), f"{name} must be an integer")
        for name in ("teacher_epochs", "prompt_epochs", "distill_epochs", "n_val"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("teacher_width", "student_width", "principles", "batch_size", "workers", "level", "n_train"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")
        _require(self.classes >= 2, "classes must be >= 2")
        step = 1 << self.level
        _require(self.height > 0 and self.width > 0 and self.height % (2 * step) == 0 and self.width % (2 * step) == 0,
                 f"height and width must be positive multiples of {2 * step} (feature tap is at half resolution)")
        _require(self.transform in TRANSFORMS, f"transform must be one of {TRANSFORMS}")
        _require(self.wavelet in WAVELETS, f"wavelet must be one of {sorted(WAVELETS)}")
        _require(self.band_subset in BAND_SUBSETS, f"band_subset must be one of {BAND_SUBSETS}")
        _require(self.mask_mode in MASK_MODES, f"mask_mode must be one of {MASK_MODES}")
        _require(self.gate_norm in GATE_NORMS, f"gate_norm must be one of {GATE_NORMS}")
        for name in ("lam", "mu", "prompt_init_scale", "weight_decay", "momentum"):
            _require(_is_num(getattr(self, name)) and getattr(self, name) >= 0, f"{name} must be a number >= 0")
        for name in ("teacher_lr", "prompt_lr", "distill_lr"):
            _require(_is_num(getattr(self, name)) and getattr(self, name) > 0, f"{name} must be > 0")
        _require(self.clip_norm is None or (_is_num(self.clip_norm) and self.clip_norm > 0),
                 "clip_norm must be null or > 0")
        _require(isinstance(self.variants, list) and self.variants, "variants must be a non-empty list")
        unknown = [v for v in self.variants if v not in VARIANTS]
        _require(not unknown, f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
        _require(isinstance(self.out, str) and self.out, "out must be a non-empty path")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def override(self, **changes) -> "ExperimentConfig":
        merged = self.to_dict()
        merged.update({k: v for k, v in changes.items() if v is not None})
        return type(self).from_dict(merged)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def variant_settings(self, name: str) -> tuple[str, str, str]:
        """``(transform, mask_mode, band_subset)`` for a grid variant or ``"default"``."""
        if name == "default":
            return self.transform, self.mask_mode, self.band_subset
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
        return VARIANTS[name]


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)
