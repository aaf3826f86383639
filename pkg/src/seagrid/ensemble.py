"""Fusion of two classifiers by averaging normalised logits before the softmax."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset_io import ClassMask, GridSpec, LabeledImage, reassemble_mask, tile_image
from .losses import softmax
from .model_core import Classifier

NORM_MODES = ("l2", "maxabs")


@dataclass(frozen=True)
class EnsembleConfig:
    weights: tuple[float, float] = (0.5, 0.5)
    norm: str = "l2"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (2,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must be two positive numbers summing to 1, got {self.weights}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"unknown normalisation {self.norm!r}; choose from {NORM_MODES}")


def normalize_logits(logits, mode: str = "l2") -> np.ndarray:
    """Scale a logit vector (or each row of a matrix) to unit L2 norm or unit max-abs."""
    z = np.asarray(logits, dtype=np.float64)
    if mode == "l2":
        scale = np.linalg.norm(z, axis=-1, keepdims=True)
    elif mode == "maxabs":
        scale = np.abs(z).max(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown normalisation {mode!r}")
    if np.any(scale == 0):
        raise ValueError("cannot normalise an all-zero logit vector")
    return z / scale


def ensemble_predict(logits_a, logits_b, cfg: EnsembleConfig = EnsembleConfig()) -> np.ndarray:
    a = np.asarray(logits_a, dtype=np.float64)
    b = np.asarray(logits_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"member logits differ in shape: {a.shape} vs {b.shape}")
    wa, wb = cfg.weights
    return softmax(wa * normalize_logits(a, cfg.norm) + wb * normalize_logits(b, cfg.norm))


def predict_patch_probs(patches, model_a: Classifier, model_b: Classifier | None = None, cfg: EnsembleConfig = EnsembleConfig()):
    la = model_a.logits(patches)
    if model_b is None:
        return softmax(la)
    if model_b.num_classes != model_a.num_classes:
        raise ValueError(f"ensemble members disagree on class count: {model_a.num_classes} vs {model_b.num_classes}")
    return ensemble_predict(la, model_b.logits(patches), cfg)


def predict_mask(
    image: LabeledImage,
    grid: GridSpec,
    model_a: Classifier,
    model_b: Classifier | None = None,
    cfg: EnsembleConfig = EnsembleConfig(),
) -> ClassMask:
    """Tile, score every patch with one or two members, and reassemble the coarse mask."""
    if model_b is not None and model_b.num_classes != model_a.num_classes:
        raise ValueError(f"ensemble members disagree on class count: {model_a.num_classes} vs {model_b.num_classes}")
    patches = tile_image(image, grid)
    return reassemble_mask(predict_patch_probs(patches, model_a, model_b, cfg), grid, image.source_id)
