"""Reference backbone, classification head, and their analytic backward passes.

Row-vector convention throughout: a batch is an N×features matrix and a layer
computes ``x @ W + b``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import Patch
from .errors import DataError, NumericError
from .kernels import bilinear_resize

DEFAULT_INPUT_HW = (16, 16)
DEFAULT_HIDDEN = (256, 128)
DEFAULT_FEATURE_DIM = 64
DEFAULT_HEAD_HIDDEN = 512
DEFAULT_DROPOUT = 0.15


@dataclass
class BackboneParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_hw: tuple[int, int] = DEFAULT_INPUT_HW

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"backbone.W{i}"] = w
            out[f"backbone.b{i}"] = b
        return out


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    dropout_p: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.W1.shape[1] != self.b1.shape[0] or self.W1.shape[1] != self.W2.shape[0] or self.W2.shape[1] != self.b2.shape[0]:
            raise ValueError("inconsistent head parameter shapes")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W2.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        return {"head.W1": self.W1, "head.b1": self.b1, "head.W2": self.W2, "head.b2": self.b2}


@dataclass
class BackboneCache:
    activations: list[np.ndarray]
    preacts: list[np.ndarray]


@dataclass
class HeadCache:
    features: np.ndarray
    preact: np.ndarray
    mask: np.ndarray | None
    hidden: np.ndarray


@dataclass
class ForwardCache:
    """Everything one training-mode forward pass stores for the backward pass."""

    head: HeadCache
    backbone: BackboneCache | None = None


# ---------------------------------------------------------------- init


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    seed: int,
    D: int = DEFAULT_FEATURE_DIM,
    C: int = 4,
    scheme: str = "uniform",
    *,
    input_hw: tuple[int, int] = DEFAULT_INPUT_HW,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    head_hidden: int = DEFAULT_HEAD_HIDDEN,
    dropout_p: float = DEFAULT_DROPOUT,
) -> tuple[BackboneParams, HeadParams]:
    """Fan-in scaled uniform weights (|w| <= sqrt(6/fan_in)), zero biases.

    ``scheme="zeros"`` gives all-zero parameters, useful for analytic checks.
    """
    if D < 1 or C < 1:
        raise ValueError("D and C must be >= 1")
    if scheme not in ("uniform", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    dims = [input_hw[0] * input_hw[1] * 3, *hidden, D]
    head_dims = [(D, head_hidden), (head_hidden, C)]

    def make(fan_in, fan_out):
        if scheme == "zeros":
            return np.zeros((fan_in, fan_out))
        return _uniform(rng, fan_in, (fan_in, fan_out))

    weights = [make(a, b) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    W1 = make(*head_dims[0])
    W2 = make(*head_dims[1])
    head = HeadParams(W1, np.zeros(head_hidden), W2, np.zeros(C), dropout_p)
    return BackboneParams(weights, biases, tuple(input_hw)), head


# ---------------------------------------------------------------- backbone


def patch_inputs(patches: Sequence[Patch | np.ndarray], input_hw: tuple[int, int]) -> np.ndarray:
    """Downsample each patch to ``input_hw`` and flatten to a centred row vector."""
    rows = []
    for p in patches:
        px = p.pixels if isinstance(p, Patch) else p
        small = bilinear_resize(px, *input_hw)
        rows.append(small.reshape(-1) - 0.5)
    return np.stack(rows) if rows else np.zeros((0, input_hw[0] * input_hw[1] * 3))


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def backbone_forward(bp: BackboneParams, X: np.ndarray, train: bool = False):
    h = np.asarray(X, dtype=np.float64)
    acts, pre = [h], []
    last = len(bp.weights) - 1
    for i, (W, b) in enumerate(zip(bp.weights, bp.biases)):
        z = h @ W + b
        h = np.maximum(z, 0.0) if i < last else z
        pre.append(z)
        acts.append(h)
    _check_finite(h, "backbone output")
    return h, (BackboneCache(acts, pre) if train else None)


def backbone_backward(bp: BackboneParams, cache: BackboneCache, dF: np.ndarray):
    """Gradients for every backbone weight/bias and for the input rows."""
    grads = {}
    g = dF
    last = len(bp.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (cache.preacts[i] > 0)
        grads[f"backbone.W{i}"] = cache.activations[i].T @ g
        grads[f"backbone.b{i}"] = g.sum(axis=0)
        g = g @ bp.weights[i].T
    return grads, g


def extract_features(backbone: BackboneParams, patch: Patch, mode: str = "eval"):
    """Feature vector of a single patch; the cache is returned in training mode only."""
    X = patch_inputs([patch], backbone.input_hw)
    feats, cache = backbone_forward(backbone, X, train=(mode == "train"))
    return feats[0], cache


# ---------------------------------------------------------------- head


def head_forward(head: HeadParams, F: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None):
    """Logits for a batch (or a single vector) of features.

    Training mode applies inverted dropout, so eval mode needs no rescaling.
    """
    single = np.ndim(F) == 1
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if F.shape[1] != head.feature_dim:
        raise ValueError(f"feature dim {F.shape[1]} != head input dim {head.feature_dim}")
    z1 = F @ head.W1 + head.b1
    a = np.maximum(z1, 0.0)
    mask = None
    if mode == "train" and head.dropout_p > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(a.shape) >= head.dropout_p) / (1.0 - head.dropout_p)
        a = a * mask
    logits = a @ head.W2 + head.b2
    _check_finite(logits, "head logits")
    cache = HeadCache(F, z1, mask, a) if mode == "train" else None
    return (logits[0] if single else logits), cache


def head_backward(head: HeadParams, cache: HeadCache, d_logits: np.ndarray):
    d_logits = np.atleast_2d(d_logits)
    grads = {
        "head.W2": cache.hidden.T @ d_logits,
        "head.b2": d_logits.sum(axis=0),
    }
    da = d_logits @ head.W2.T
    if cache.mask is not None:
        da = da * cache.mask
    dz1 = da * (cache.preact > 0)
    grads["head.W1"] = cache.features.T @ dz1
    grads["head.b1"] = dz1.sum(axis=0)
    return grads, dz1 @ head.W1.T


def model_backward(cache: ForwardCache | None, d_logits: np.ndarray, head: HeadParams, backbone: BackboneParams | None = None):
    """Analytic gradients of a logits-composed loss for every parameter.

    Returns ``(grads, d_input)`` where ``d_input`` is the gradient w.r.t. the
    backbone input rows, or w.r.t. the features when no backbone cache exists.
    """
    if cache is None or not isinstance(cache, ForwardCache):
        raise ValueError("backward needs the cache of a training-mode forward pass")
    if (cache.backbone is None) != (backbone is None):
        raise ValueError("backbone cache and backbone parameters must be given together")
    grads, dF = head_backward(head, cache.head, d_logits)
    if backbone is None:
        return grads, dF
    bgrads, dX = backbone_backward(backbone, cache.backbone, dF)
    grads.update(bgrads)
    return grads, dX


# ---------------------------------------------------------------- backbones


class MLPBackbone:
    """Trainable reference encoder over downsampled patch pixels."""

    trainable = True

    def __init__(self, params: BackboneParams):
        self.params = params

    @property
    def feature_dim(self) -> int:
        return self.params.feature_dim

    def inputs(self, patches) -> np.ndarray:
        return patch_inputs(patches, self.params.input_hw)

    def features(self, patches) -> np.ndarray:
        return backbone_forward(self.params, self.inputs(patches))[0]


class PrecomputedBackbone:
    """Looks features up by (source_id, row, col); cannot be trained."""

    trainable = False

    def __init__(self, table: dict[tuple[str, int, int], np.ndarray]):
        if not table:
            raise DataError("empty feature table")
        self.table = table
        self._dim = len(next(iter(table.values())))

    @property
    def feature_dim(self) -> int:
        return self._dim

    def features(self, patches) -> np.ndarray:
        missing = [p.key for p in patches if p.key not in self.table]
        if missing:
            shown = ", ".join(f"{s}[{r},{c}]" for s, r, c in missing[:10])
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise DataError(f"no precomputed features for {len(missing)} patches: {shown}{more}")
        return np.stack([self.table[p.key] for p in patches])


@dataclass
class Classifier:
    """A backbone plus classification head, plus the class manifest it was trained on."""

    backbone: MLPBackbone | PrecomputedBackbone
    head: HeadParams
    class_names: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        if self.backbone.trainable:
            out.update(self.backbone.params.named())
        out.update(self.head.named())
        return out

    def features(self, patches) -> np.ndarray:
        return self.backbone.features(patches)

    def logits(self, patches) -> np.ndarray:
        if not len(patches):
            return np.zeros((0, self.num_classes))
        return head_forward(self.head, self.features(patches), "eval")[0]

    def forward_train(self, patches, rng, inputs: np.ndarray | None = None, train_backbone: bool = True):
        """Training-mode logits with the cache needed by :meth:`backward`."""
        bb_cache = None
        if self.backbone.trainable and train_backbone:
            X = self.backbone.inputs(patches) if inputs is None else inputs
            F, bb_cache = backbone_forward(self.backbone.params, X, train=True)
        else:
            F = self.features(patches)
        logits, hcache = head_forward(self.head, F, "train", rng)
        if hcache is None:
            raise AssertionError("head cache missing in training mode")
        return logits, ForwardCache(hcache, bb_cache)

    def backward(self, cache: ForwardCache, d_logits):
        bp = self.backbone.params if cache.backbone is not None else None
        grads, _ = model_backward(cache, d_logits, self.head, bp)
        return grads


# ---------------------------------------------------------------- feature CSV


def write_feature_csv(path: str | os.PathLike, rows) -> None:
    """Write ``(source_id, row, col, vector)`` tuples; floats keep full precision."""
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to write")
    dim = len(rows[0][3])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "row", "col", *(f"f{i}" for i in range(dim))])
        for sid, r, c, vec in rows:
            if len(vec) != dim:
                raise ValueError(f"vector for {sid}[{r},{c}] has dim {len(vec)}, expected {dim}")
            w.writerow([sid, int(r), int(c), *(repr(float(v)) for v in vec)])


def load_precomputed_features(path: str | os.PathLike) -> dict[tuple[str, int, int], np.ndarray]:
    table: dict[tuple[str, int, int], np.ndarray] = {}
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["source_id", "row", "col"]:
            raise DataError(f"{path}:1: header must start with source_id,row,col")
        dim = len(header) - 3
        if dim < 1:
            raise DataError(f"{path}:1: no feature columns")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) - 3 != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} features, found {len(rec) - 3}")
            try:
                key = (rec[0], int(rec[1]), int(rec[2]))
                vec = np.array([float(v) for v in rec[3:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if key in table:
                raise DataError(f"{path}:{lineno}: duplicate patch {key}")
            table[key] = vec
    if not table:
        raise DataError(f"{path}: no feature rows")
    return table
