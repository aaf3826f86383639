"""Contrastive pretraining of the reference backbone on augmented patch pairs."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset_io import AugConfig, Patch, augment
from .errors import NumericError
from .losses import DEFAULT_TEMPERATURE, nt_xent
from .model_core import BackboneParams, backbone_backward, backbone_forward, patch_inputs
from .optimizer import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class PretextConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 3e-4
    tau: float = DEFAULT_TEMPERATURE
    crop_fraction: float | None = 0.75
    aug: AugConfig = field(default_factory=AugConfig)


def view_config(cfg: PretextConfig, patch_shape: tuple[int, int]) -> AugConfig:
    """The augmentation config for one patch size, with the crop resolved to pixels."""
    if cfg.crop_fraction is None or cfg.aug.crop_size is not None:
        return cfg.aug
    h, w = patch_shape
    size = (max(1, int(round(h * cfg.crop_fraction))), max(1, int(round(w * cfg.crop_fraction))))
    return dataclasses.replace(cfg.aug, crop_size=size)


def make_views(patch: Patch, cfg: AugConfig, rng: np.random.Generator) -> tuple[Patch, Patch]:
    return augment(patch, cfg, rng), augment(patch, cfg, rng)


def pretrain(
    backbone: BackboneParams,
    patches: Sequence[Patch],
    cfg: PretextConfig,
    rng: np.random.Generator,
    adam: AdamState | None = None,
) -> tuple[BackboneParams, list[float]]:
    """NT-Xent on two views of every patch; no labels are used.

    Each step embeds 2B views laid out as (view_a, view_b) pairs and takes one
    Adam step on the backbone. Returns the (in-place updated) backbone and the
    mean loss of each epoch.
    """
    if len(patches) < 2:
        raise ValueError("pretraining needs at least two patches")
    if adam is None:
        adam = AdamState(lr=cfg.lr)
    params = backbone.named()
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(patches))
        losses = []
        for step, start in enumerate(range(0, len(patches), cfg.batch_size)):
            views = []
            for i in order[start : start + cfg.batch_size]:
                p = patches[i]
                views.extend(make_views(p, view_config(cfg, p.pixels.shape[:2]), rng))
            X = patch_inputs(views, backbone.input_hw)
            F, cache = backbone_forward(backbone, X, train=True)
            loss, dF = nt_xent(F, cfg.tau)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite pretext loss at epoch {epoch}, step {step}")
            grads, _ = backbone_backward(backbone, cache, dF)
            adam_step(params, grads, adam)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        log.info("pretext epoch %d loss %.5f", epoch, curve[-1])
    return backbone, curve
