"""Class-weighted cross-entropy and the NT-Xent contrastive loss, with gradients."""
from __future__ import annotations

import numpy as np

from .errors import DataError
from .kernels import nt_xent_loss_grad

# Background, Ferny, Rounded, Strappy
DEFAULT_CLASS_WEIGHTS = (1.0, 1.5, 1.2, 1.2)
DEFAULT_TEMPERATURE = 0.07


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def check_weights(weights, n_classes: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ValueError(f"need {n_classes} class weights, got {w.shape[0] if w.ndim else 'scalar'}")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    return w


def weighted_ce(logits, target: int, weights) -> tuple[float, np.ndarray]:
    """``-w[target] * log_softmax(logits)[target]`` and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    w = check_weights(weights, logits.shape[0])
    if not 0 <= target < logits.shape[0]:
        raise ValueError(f"target {target} out of range for {logits.shape[0]} classes")
    loss = -w[target] * log_softmax(logits)[target]
    grad = softmax(logits)
    grad[target] -= 1.0
    return float(loss), w[target] * grad


def weighted_ce_batch(logits: np.ndarray, targets: np.ndarray, weights) -> tuple[float, np.ndarray]:
    """Batch loss normalised by the summed target weights.

    This is the usual weighted "mean" reduction: with all-ones weights it is
    the plain mean cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    w = check_weights(weights, logits.shape[1])
    n = logits.shape[0]
    wt = w[targets]
    total = wt.sum()
    nll = -log_softmax(logits)[np.arange(n), targets]
    loss = float((wt * nll).sum() / total)
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    grad *= (wt / total)[:, None]
    return loss, grad


def nt_xent(batch: np.ndarray, tau: float = DEFAULT_TEMPERATURE) -> tuple[float, np.ndarray]:
    """Mean NT-Xent over all 2B anchors; rows (2k, 2k+1) are positive pairs.

    Each anchor's denominator sums over every other row, its positive included.
    """
    z = np.asarray(batch, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ValueError(f"expected a 2B x D matrix with B >= 1, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise DataError(f"zero-norm feature rows: {bad.tolist()}")
    return nt_xent_loss_grad(z, tau)
