"""Feature-template pseudo-labelling and the training loop that refreshes templates every epoch."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset_io import AugConfig, GridSpec, LabeledImage, Patch, augment, tile_image
from .errors import DataError, NumericError
from .kernels import rowwise_cosine, template_sums
from .losses import DEFAULT_CLASS_WEIGHTS, weighted_ce_batch
from .model_core import Classifier, backbone_forward, load_precomputed_features, write_feature_csv
from .optimizer import AdamState, adam_step

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12


@dataclass
class TemplateBank:
    class_ids: tuple[int, ...]
    templates: np.ndarray
    counts: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        if 0 not in self.class_ids:
            raise DataError("template bank needs a background (class 0) template")

    def row(self, class_id: int) -> np.ndarray:
        try:
            return self.templates[self.class_ids.index(class_id)]
        except ValueError:
            raise KeyError(f"no template for class {class_id}") from None

    @property
    def degenerate(self) -> list[int]:
        norms = np.linalg.norm(self.templates, axis=1)
        return [c for c, n in zip(self.class_ids, norms) if n < DEGENERATE_NORM]

    def dense(self, n_classes: int) -> np.ndarray:
        """Templates scattered into an n_classes×D array (absent classes are NaN)."""
        out = np.full((n_classes, self.templates.shape[1]), np.nan)
        out[list(self.class_ids)] = self.templates
        return out


@dataclass
class PseudoLabel:
    key: tuple[str, int, int] | None
    label: int
    sim_bg: float
    sim_cls: float


def compute_templates(
    features: Mapping[int, Sequence[np.ndarray] | np.ndarray],
    cap: int | None = None,
    epoch: int = 0,
    keys: Mapping[int, Sequence] | None = None,
) -> TemplateBank:
    """Average the L2-normalised feature vectors of every class.

    With ``cap`` only the first ``cap`` vectors of each class are used.
    ``keys`` (same layout as ``features``) only improves error messages.
    """
    if len(features.get(0, ())) == 0:
        raise DataError("no background (class 0) features to build a template from")
    ids, rows, labels = [], [], []
    for c in sorted(features):
        arr = np.atleast_2d(np.asarray(features[c], dtype=np.float64))
        if arr.size == 0:
            continue
        if cap is not None:
            arr = arr[:cap]
        zero = np.flatnonzero(np.linalg.norm(arr, axis=1) == 0)
        if zero.size:
            who = keys[c][zero[0]] if keys is not None else f"class {c} item {zero[0]}"
            raise DataError(f"zero-norm feature vector for patch {who}")
        ids.append(int(c))
        rows.append(arr)
        labels.append(np.full(arr.shape[0], len(ids) - 1, dtype=np.int64))
    sums, counts = template_sums(np.concatenate(rows), np.concatenate(labels), len(ids))
    bank = TemplateBank(tuple(ids), sums / counts[:, None], counts, epoch)
    if bank.degenerate:
        log.warning("degenerate (zero) templates for classes %s", bank.degenerate)
    return bank


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def assign_pseudolabel(f, bank: TemplateBank, image_label: int, key=None) -> PseudoLabel:
    """Background if the patch is strictly closer to the background template, else the image label."""
    bg = bank.row(0)
    cls = bank.row(image_label)
    if np.linalg.norm(bg) < DEGENERATE_NORM or np.linalg.norm(cls) < DEGENERATE_NORM:
        raise DataError(f"degenerate template for class 0 or {image_label}")
    if np.linalg.norm(f) == 0:
        raise DataError(f"zero-norm feature vector for patch {key}")
    sim_bg = cosine_sim(f, bg)
    sim_cls = cosine_sim(f, cls)
    label = 0 if sim_bg > sim_cls else int(image_label)
    return PseudoLabel(key, label, sim_bg, sim_cls)


def assign_pseudolabels(F: np.ndarray, image_labels: np.ndarray, bank: TemplateBank):
    """Vectorised :func:`assign_pseudolabel`; returns ``(labels, sim_bg, sim_cls)``."""
    F = np.asarray(F, dtype=np.float64)
    image_labels = np.asarray(image_labels, dtype=np.int64)
    if F.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    zero = np.flatnonzero(np.linalg.norm(F, axis=1) == 0)
    if zero.size:
        raise DataError(f"zero-norm feature vector at patch index {zero[0]}")
    missing = sorted(set(image_labels.tolist()) - set(bank.class_ids))
    if missing:
        raise KeyError(f"no template for classes {missing}")
    bad = [c for c in bank.degenerate if c == 0 or c in set(image_labels.tolist())]
    if bad:
        raise DataError(f"degenerate templates for classes {bad}")
    pos = np.array([bank.class_ids.index(c) for c in image_labels])
    bg = np.broadcast_to(bank.row(0), F.shape)
    sim_bg = rowwise_cosine(F, bg)
    sim_cls = rowwise_cosine(F, bank.templates[pos])
    labels = np.where(sim_bg > sim_cls, 0, image_labels)
    # background images compare v0 against itself; force the result
    labels[image_labels == 0] = 0
    return labels.astype(np.int64), sim_bg, sim_cls


def bank_from_patches(model: Classifier, patches: Sequence[Patch], cap=None, epoch=0, feats=None) -> TemplateBank:
    if feats is None:
        feats = model.features(patches)
    labels = np.array([p.inherited_label for p in patches])
    by_class = {int(c): feats[labels == c] for c in np.unique(labels)}
    keys = {int(c): [patches[i].key for i in np.flatnonzero(labels == c)] for c in np.unique(labels)}
    return compute_templates(by_class, cap=cap, epoch=epoch, keys=keys)


def save_bank_csv(bank: TemplateBank, path: str | os.PathLike) -> None:
    """Feature-CSV layout with the class id as source_id; ``row`` holds N_c and ``col`` the epoch."""
    write_feature_csv(path, [(str(c), int(n), bank.epoch, t) for c, n, t in zip(bank.class_ids, bank.counts, bank.templates)])


def load_bank_csv(path: str | os.PathLike) -> TemplateBank:
    table = load_precomputed_features(path)
    items = sorted(table.items(), key=lambda kv: int(kv[0][0]))
    epochs = {k[2] for k, _ in items}
    if len(epochs) != 1:
        raise DataError(f"{path}: templates from mixed epochs {sorted(epochs)}")
    return TemplateBank(
        tuple(int(k[0]) for k, _ in items),
        np.stack([v for _, v in items]),
        np.array([k[1] for k, _ in items], dtype=np.int64),
        epochs.pop(),
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-5
    batch_images: int = 3
    batch_patches: int = 32
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    template_cap: int | None = None
    clip_norm: float | None = None
    train_backbone: bool = True
    augment: AugConfig | None = None


@dataclass
class EpochStats:
    epoch: int
    loss: float
    flips: int
    drift: dict[int, float]
    label_counts: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "flips": self.flips,
            "drift": {str(k): v for k, v in self.drift.items()},
            "label_counts": {str(k): v for k, v in self.label_counts.items()},
        }


@dataclass
class SeaFeatsResult:
    model: Classifier
    bank: TemplateBank
    stats: list[EpochStats]
    pseudolabels: np.ndarray
    patches: list[Patch]
    adam: AdamState = field(default_factory=AdamState)


def _tile_all(images: Sequence[LabeledImage], grid: GridSpec):
    per_image = [tile_image(im, grid) for im in images]
    flat = [p for ps in per_image for p in ps]
    offsets = np.cumsum([0] + [len(ps) for ps in per_image])
    return flat, offsets


def train_seafeats(
    model: Classifier,
    images: Sequence[LabeledImage],
    grid: GridSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    adam: AdamState | None = None,
) -> SeaFeatsResult:
    """Train on template pseudo-labels, refreshing the templates after every epoch.

    Batches hold every patch of ``cfg.batch_images`` images. The pseudo-labels
    are fixed within an epoch.
    """
    if not any(im.label == 0 for im in images):
        raise DataError("training needs at least one background-labelled image")
    patches, offsets = _tile_all(images, grid)
    inherited = np.array([p.inherited_label for p in patches], dtype=np.int64)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    if weights.shape[0] != model.num_classes:
        raise ValueError(f"{weights.shape[0]} class weights for a {model.num_classes}-class model")
    if adam is None:
        adam = AdamState(lr=cfg.lr, clip_norm=cfg.clip_norm)
    params = model.params() if cfg.train_backbone else model.head.named()
    train_backbone = cfg.train_backbone and model.backbone.trainable

    use_inputs = model.backbone.trainable
    base_inputs = model.backbone.inputs(patches) if use_inputs else None

    def current_features():
        if use_inputs:
            return backbone_forward(model.backbone.params, base_inputs)[0]
        return model.features(patches)

    feats = current_features()
    bank = bank_from_patches(model, patches, cfg.template_cap, epoch=0, feats=feats)
    prev_labels = inherited.copy()
    labels = inherited.copy()
    stats: list[EpochStats] = []
    n_images = len(images)

    for epoch in range(1, cfg.epochs + 1):
        labels, _, _ = assign_pseudolabels(feats, inherited, bank)
        flips = int(np.sum(labels != prev_labels))
        prev_labels = labels

        order = rng.permutation(n_images)
        losses = []
        for step, start in enumerate(range(0, n_images, cfg.batch_images)):
            chosen = np.sort(order[start : start + cfg.batch_images])
            idx = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in chosen])
            batch = [patches[i] for i in idx]
            if cfg.augment is not None:
                batch = [augment(p, cfg.augment, rng) for p in batch]
                inputs = model.backbone.inputs(batch) if use_inputs else None
            else:
                inputs = base_inputs[idx] if use_inputs else None
            logits, cache = model.forward_train(batch, rng, inputs=inputs, train_backbone=train_backbone)
            loss, dlogits = weighted_ce_batch(logits, labels[idx], weights)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = model.backward(cache, dlogits)
            adam_step(params, grads, adam)
            losses.append(loss)

        feats = current_features()
        new_bank = bank_from_patches(model, patches, cfg.template_cap, epoch=bank.epoch + 1, feats=feats)
        drift = {c: float(np.linalg.norm(new_bank.row(c) - bank.row(c))) for c in new_bank.class_ids}
        bank = new_bank
        counts = np.bincount(labels, minlength=model.num_classes)
        st = EpochStats(epoch, float(np.mean(losses)), flips, drift, {i: int(n) for i, n in enumerate(counts)})
        stats.append(st)
        log.info("seafeats epoch %d loss %.5f flips %d", epoch, st.loss, flips)

    if cfg.epochs > 0:
        labels, _, _ = assign_pseudolabels(feats, inherited, bank)
    return SeaFeatsResult(model, bank, stats, labels, patches, adam)
