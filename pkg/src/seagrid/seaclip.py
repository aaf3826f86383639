"""Prompt-group pseudo-labelling through a pluggable vision-language scorer."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset_io import Patch
from .errors import DataError, NumericError
from .losses import DEFAULT_CLASS_WEIGHTS, softmax, weighted_ce_batch
from .model_core import Classifier
from .optimizer import AdamState, adam_step

log = logging.getLogger(__name__)

BACKGROUND, SEAGRASS, FISH = 0, 1, 2
GROUP_NAMES = {BACKGROUND: "background", SEAGRASS: "seagrass", FISH: "fish"}
DEFAULT_LOGIT_SCALE = 100.0

_PROMPTS = {
    "deepseagrass": {
        BACKGROUND: [
            "a photo of sand",
            "a photo of water",
            "a photo of sand or water",
            "a blurry photo of water",
            "a blurry photo of sand",
        ],
        SEAGRASS: [
            "a blurry photo of seagrass",
            "a photo containing some seagrass",
            "a photo of underwater plants",
            "a photo of underwater grass",
            "a photo of green, grass-like leaves underwater",
            "a photo of seagrass",
        ],
    },
    "global_wetlands": {
        BACKGROUND: [
            "a photo of sand",
            "a photo of blue water",
            "a photo of murky, green water",
            "a photo of sand or water",
            "a blurry photo of water",
            "a blurry photo of sand",
        ],
        SEAGRASS: [
            "a blurry photo of seagrass",
            "a photo containing some seagrass",
            "a photo of underwater plants",
            "a photo of underwater grass",
            "a photo of green, grass-like leaves underwater",
            "a photo of seagrass",
        ],
        FISH: [
            "a photo of fish",
            "a close-up photo of fish",
            "a blurry photo of fish",
            "a photo containing part of a fish",
            "a photo of fish scales",
        ],
    },
}


@dataclass(frozen=True)
class PromptGroup:
    group_id: int
    prompts: tuple[str, ...]

    def __post_init__(self):
        if not self.prompts:
            raise ValueError(f"prompt group {self.group_id} is empty")
        if self.group_id not in GROUP_NAMES:
            raise ValueError(f"unknown group id {self.group_id}")


def validate_groups(groups: Sequence[PromptGroup]) -> None:
    seen = set()
    for g in groups:
        for p in g.prompts:
            if p in seen:
                raise ValueError(f"prompt {p!r} appears twice")
            seen.add(p)
    if not any(g.group_id == BACKGROUND for g in groups):
        raise ValueError("prompt groups need a background group")


def all_prompts(groups: Sequence[PromptGroup]) -> list[str]:
    return [p for g in groups for p in g.prompts]


def prompt_group_index(groups: Sequence[PromptGroup]) -> np.ndarray:
    """Group id of every prompt, in concatenated order."""
    return np.array([g.group_id for g in groups for _ in g.prompts], dtype=np.int64)


def builtin_prompt_groups(scenario: str) -> list[PromptGroup]:
    try:
        table = _PROMPTS[scenario]
    except KeyError:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {sorted(_PROMPTS)}") from None
    groups = [PromptGroup(gid, tuple(prompts)) for gid, prompts in table.items()]
    validate_groups(groups)
    return groups


def load_prompt_groups(path: str | os.PathLike) -> list[PromptGroup]:
    """JSON list of ``{"group_id": int, "prompts": [str, ...]}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        groups = [PromptGroup(int(d["group_id"]), tuple(d["prompts"])) for d in data]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad prompt-group file {path}: {exc}") from exc
    validate_groups(groups)
    return groups


def save_prompt_groups(groups: Sequence[PromptGroup], path: str | os.PathLike) -> None:
    data = [{"group_id": g.group_id, "prompts": list(g.prompts)} for g in groups]
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- zero-shot


def zero_shot_group(similarities, groups: Sequence[PromptGroup]) -> int:
    """Group of the highest-scoring prompt (first prompt wins ties)."""
    s = np.asarray(similarities, dtype=np.float64)
    index = prompt_group_index(groups)
    if s.shape != index.shape:
        raise ValueError(f"{s.shape[0]} scores for {index.shape[0]} prompts")
    return int(index[int(np.argmax(s))])


def zero_shot_probs(similarities, logit_scale: float = DEFAULT_LOGIT_SCALE) -> np.ndarray:
    """Per-prompt probabilities for reporting; the label only depends on the argmax."""
    return softmax(logit_scale * np.asarray(similarities, dtype=np.float64))


class VlmScorer(Protocol):
    def score(self, patch: Patch, prompts: Sequence[str]) -> np.ndarray: ...


_SEAGRASS_WORDS = ("seagrass", "grass", "plant", "leaves", "leaf")
_SAND_WORDS = ("sand",)
_WATER_WORDS = ("water",)
_FISH_WORDS = ("fish",)


class MockScorer:
    """Deterministic stand-in for a vision-language model.

    Patches are embedded from colour statistics (greenness, sandiness,
    blueness, sparkle) and prompts from keyword directions plus a small
    seeded-hash perturbation. Green-dominant patches therefore score highest
    on seagrass prompts, sand-coloured ones on background prompts.
    """

    dim = 5
    jitter = 0.02

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def embed_patch(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
        r, g, b = px.mean(axis=0)
        sparkle = float(np.mean(px.std(axis=0))) + max(0.0, min(r, g, b) - 0.6)
        return np.array([g - max(r, b), r - b, b - r, sparkle, 0.1])

    def embed_prompt(self, prompt: str) -> np.ndarray:
        if prompt in self._cache:
            return self._cache[prompt]
        text = prompt.lower()
        vec = np.zeros(self.dim)
        if any(w in text for w in _SEAGRASS_WORDS):
            vec[0] += 1.0
        if any(w in text for w in _SAND_WORDS):
            vec[1] += 1.0
        if any(w in text for w in _WATER_WORDS):
            vec[2] += 1.0
            vec[4] += 0.5
        if any(w in text for w in _FISH_WORDS):
            vec[3] += 2.0
        digest = hashlib.sha256(f"{self.seed}:{prompt}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = vec + rng.normal(0.0, self.jitter, self.dim)
        self._cache[prompt] = vec
        return vec

    def score(self, patch: Patch, prompts: Sequence[str]) -> np.ndarray:
        e = self.embed_patch(patch.pixels)
        return np.array([e @ self.embed_prompt(p) for p in prompts])


def mock_scorer(seed: int = 0) -> MockScorer:
    return MockScorer(seed)


# ---------------------------------------------------------------- score files


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    keys: list[tuple[str, int, int]]
    prompts: list[str]

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}

    def score(self, patch: Patch, prompts: Sequence[str]) -> np.ndarray:
        if list(prompts) != self.prompts:
            raise DataError("requested prompts differ from the prompts stored with the score matrix")
        try:
            return self.scores[self.index[patch.key]]
        except KeyError:
            raise DataError(f"no scores for patch {patch.parent_id}[{patch.row},{patch.col}]") from None


def write_score_csv(path: str | os.PathLike, matrix: ScoreMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# prompts: " + "\t".join(matrix.prompts) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "row", "col", *(f"s{i}" for i in range(len(matrix.prompts)))])
        for key, row in zip(matrix.keys, matrix.scores):
            w.writerow([key[0], key[1], key[2], *(repr(float(v)) for v in row)])


def load_score_matrix(path: str | os.PathLike, groups: Sequence[PromptGroup]) -> ScoreMatrix:
    prompts = all_prompts(groups)
    q = len(prompts)
    keys, rows = [], []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith("# prompts:"):
            raise DataError(f"{path}:1: expected '# prompts: ...' comment line")
        stored = first[len("# prompts:") :].lstrip(" ").split("\t")
        if stored != prompts:
            raise DataError(f"{path}:1: stored prompts do not match the configured prompt groups")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != q + 3 or header[:3] != ["source_id", "row", "col"]:
            raise DataError(f"{path}:2: header must be source_id,row,col plus {q} score columns")
        for lineno, rec in enumerate(reader, start=3):
            if not rec:
                continue
            if len(rec) != q + 3:
                raise DataError(f"{path}:{lineno}: expected {q + 3} columns, found {len(rec)}")
            try:
                key = (rec[0], int(rec[1]), int(rec[2]))
                vals = [float(v) for v in rec[3:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate patch {key}")
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite score")
            seen.add(key)
            keys.append(key)
            rows.append(vals)
    scores = np.array(rows, dtype=np.float64).reshape(len(rows), q)
    return ScoreMatrix(scores, keys, prompts)


def score_patches(patches: Sequence[Patch], scorer, groups: Sequence[PromptGroup]) -> ScoreMatrix:
    prompts = all_prompts(groups)
    rows = []
    for p in patches:
        try:
            s = np.asarray(scorer.score(p, prompts), dtype=np.float64)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"scorer failed on patch {p.parent_id}[{p.row},{p.col}]: {exc}") from exc
        if s.shape != (len(prompts),) or not np.all(np.isfinite(s)):
            raise DataError(f"scorer returned bad scores for patch {p.parent_id}[{p.row},{p.col}]")
        rows.append(s)
    return ScoreMatrix(np.array(rows).reshape(len(rows), len(prompts)), [p.key for p in patches], prompts)


# ---------------------------------------------------------------- pseudo-labels


def generate_pseudolabels(patches: Sequence[Patch], scorer, groups: Sequence[PromptGroup], fish_class: int | None = None):
    """Map each patch's zero-shot group verdict onto a class id.

    Background verdict gives class 0, a seagrass verdict gives the patch's
    inherited (image-level) label, a fish verdict gives ``fish_class``.
    """
    validate_groups(groups)
    has_fish = any(g.group_id == FISH for g in groups)
    if has_fish and fish_class is None:
        raise ValueError("outlier mode needs a fish class id")
    matrix = score_patches(patches, scorer, groups)
    index = prompt_group_index(groups)
    out = []
    for p, s in zip(patches, matrix.scores):
        verdict = int(index[int(np.argmax(s))])
        if verdict == BACKGROUND:
            label = 0
        elif verdict == SEAGRASS:
            label = p.inherited_label
        else:
            label = fish_class
        out.append((p, int(label)))
    return out


# ---------------------------------------------------------------- training


@dataclass
class SeaClipConfig:
    epochs: int = 150
    lr: float = 1e-5
    batch_patches: int = 32
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    clip_norm: float | None = None
    train_backbone: bool = True


def train_seaclip(
    model: Classifier,
    patches: Sequence[Patch],
    labels: Sequence[int],
    cfg: SeaClipConfig,
    rng: np.random.Generator,
    adam: AdamState | None = None,
):
    """Weighted cross-entropy on fixed pseudo-labels, batched by patches.

    Returns ``(model, per-epoch mean losses, adam state)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(patches):
        raise DataError(f"{labels.shape[0]} pseudo-labels for {len(patches)} patches")
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    if adam is None:
        adam = AdamState(lr=cfg.lr, clip_norm=cfg.clip_norm)
    train_backbone = cfg.train_backbone and model.backbone.trainable
    params = model.params() if train_backbone else model.head.named()
    inputs = model.backbone.inputs(patches) if train_backbone else None
    history = []
    n = len(patches)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, cfg.batch_patches)):
            idx = order[start : start + cfg.batch_patches]
            batch = [patches[i] for i in idx]
            logits, cache = model.forward_train(
                batch, rng, inputs=inputs[idx] if inputs is not None else None, train_backbone=train_backbone
            )
            loss, dlogits = weighted_ce_batch(logits, labels[idx], weights)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            adam_step(params, model.backward(cache, dlogits), adam)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("seaclip epoch %d loss %.5f", epoch, history[-1])
    return model, history, adam
