"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Lists are comma separated, grids
and sizes are written ``RxC``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataset_io import GridSpec
from .errors import SeagridError
from .losses import DEFAULT_CLASS_WEIGHTS


class ConfigError(SeagridError):
    """Invalid configuration or command-line usage."""


@dataclass
class Config:
    grid: GridSpec = field(default_factory=lambda: GridSpec(5, 8))
    classes: tuple[str, ...] = ()
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    seed: int = 0
    # classifier
    feature_dim: int = 64
    input_size: tuple[int, int] = (16, 16)
    hidden: tuple[int, ...] = (256, 128)
    head_hidden: int = 512
    dropout: float = 0.15
    lr: float = 1e-5
    epochs: int = 150
    batch_images: int = 3
    batch_patches: int = 32
    template_cap: int = 0
    clip_norm: float = 0.0
    # contrastive pretraining
    pretrain_epochs: int = 20
    pretrain_batch: int = 8
    pretrain_lr: float = 3e-4
    tau: float = 0.07
    crop_fraction: float = 0.75
    # vision-language pseudo-labels
    scenario: str = "deepseagrass"
    outlier: bool = False
    logit_scale: float = 100.0
    # inference
    ensemble_mode: str = "l2"
    ensemble_weights: tuple[float, float] = (0.5, 0.5)
    color_correct: bool = False
    resize: str = "none"
    # few-shot fine-tuning
    finetune_lr: float = 1e-5
    finetune_shots: int = 10

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_size(text: str) -> tuple[int, int]:
    g = GridSpec.parse(text)
    return (g.rows, g.cols)


_PARSERS = {
    "grid": GridSpec.parse,
    "classes": lambda s: tuple(x.strip() for x in s.split(",") if x.strip()),
    "class_weights": lambda s: tuple(float(x) for x in s.split(",")),
    "input_size": _parse_size,
    "hidden": lambda s: tuple(int(x) for x in s.split(",")),
    "ensemble_weights": lambda s: tuple(float(x) for x in s.split(",")),
    "outlier": _parse_bool,
    "color_correct": _parse_bool,
    "scenario": str.strip,
    "ensemble_mode": str.strip,
    "resize": str.strip,
}


def parse_config(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    cfg = base or Config()
    fields = {f.name: f for f in dataclasses.fields(Config)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        parser = _PARSERS.get(key)
        if parser is None:
            parser = {"int": int, "float": float}[fields[key].type]
        try:
            updates[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    cfg = cfg.replace(**updates)
    validate(cfg)
    return cfg


def load_config(path: str | os.PathLike | None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, source=str(p))


def validate(cfg: Config) -> None:
    if cfg.scenario not in ("deepseagrass", "global_wetlands"):
        raise ConfigError(f"unknown scenario {cfg.scenario!r}")
    if cfg.ensemble_mode not in ("l2", "maxabs"):
        raise ConfigError(f"unknown ensemble_mode {cfg.ensemble_mode!r}")
    if not 0 <= cfg.dropout < 1:
        raise ConfigError("dropout must lie in [0, 1)")
    if any(w <= 0 for w in cfg.class_weights):
        raise ConfigError("class weights must be positive")
    if cfg.resize != "none":
        try:
            _parse_size(cfg.resize)
        except ValueError as exc:
            raise ConfigError(f"resize must be 'none' or HxW: {exc}") from exc
    for name in ("epochs", "pretrain_epochs"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    for name in ("batch_images", "batch_patches", "pretrain_batch", "feature_dim", "head_hidden"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.lr <= 0 or cfg.pretrain_lr <= 0 or cfg.finetune_lr <= 0 or cfg.tau <= 0:
        raise ConfigError("learning rates and tau must be positive")
