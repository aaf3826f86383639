"""Hot numeric kernels.

Every kernel exists twice: a loop form compiled with numba and a vectorised
numpy form. The public name is bound to one of them at import time (see
``seagrid._accel``); both stay importable so tests and the benchmark can
compare them directly.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit, pick

__all__ = [
    "USE_NUMBA",
    "bilinear_resize",
    "nt_xent_loss_grad",
    "template_sums",
    "rowwise_cosine",
    "confusion_counts",
    "adam_update",
]


# ---------------------------------------------------------------- resize


def _bilinear_resize_loops(img, out_h, out_w):
    h, w, c = img.shape
    out = np.empty((out_h, out_w, c), dtype=np.float64)
    sy = h / out_h
    sx = w / out_w
    for i in range(out_h):
        y = (i + 0.5) * sy - 0.5
        if y < 0.0:
            y = 0.0
        if y > h - 1:
            y = h - 1.0
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = (j + 0.5) * sx - 0.5
            if x < 0.0:
                x = 0.0
            if x > w - 1:
                x = w - 1.0
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            for k in range(c):
                top = img[y0, x0, k] * (1.0 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1.0 - fx) + img[y1, x1, k] * fx
                out[i, j, k] = top * (1.0 - fy) + bot * fy
    return out


def _axis_coords(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _bilinear_resize_numpy(img, out_h, out_w):
    h, w, _ = img.shape
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    return top * (1.0 - fy) + bot * fy


bilinear_resize_numba = njit(_bilinear_resize_loops)
bilinear_resize_numpy = _bilinear_resize_numpy
_bilinear_resize_impl = pick(bilinear_resize_numba, bilinear_resize_numpy)


def bilinear_resize(img, out_h, out_w):
    """Resize an H×W×C float image with half-pixel-centred bilinear sampling."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    return _bilinear_resize_impl(img, int(out_h), int(out_w))


# ---------------------------------------------------------------- NT-Xent


def _nt_xent_loops(z, tau):
    n, d = z.shape
    unit = np.empty((n, d))
    norms = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += z[i, k] * z[i, k]
        norms[i] = math.sqrt(s)
        for k in range(d):
            unit[i, k] = z[i, k] / norms[i]
    sim = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(d):
                s += unit[i, k] * unit[j, k]
            sim[i, j] = s / tau
    # g[i, k] = dL/dsim[i, k]
    g = np.zeros((n, n))
    loss = 0.0
    for i in range(n):
        pos = i + 1 if i % 2 == 0 else i - 1
        mx = -np.inf
        for k in range(n):
            if k != i and sim[i, k] > mx:
                mx = sim[i, k]
        den = 0.0
        for k in range(n):
            if k != i:
                den += math.exp(sim[i, k] - mx)
        loss += -(sim[i, pos] - mx) + math.log(den)
        for k in range(n):
            if k != i:
                g[i, k] = math.exp(sim[i, k] - mx) / den / n
        g[i, pos] -= 1.0 / n
    loss /= n
    dz = np.zeros((n, d))
    for i in range(n):
        dot = 0.0
        for k in range(d):
            acc = 0.0
            for j in range(n):
                acc += (g[i, j] + g[j, i]) * unit[j, k]
            acc /= tau
            dz[i, k] = acc
            dot += acc * unit[i, k]
        for k in range(d):
            dz[i, k] = (dz[i, k] - dot * unit[i, k]) / norms[i]
    return loss, dz


def _nt_xent_numpy(z, tau):
    n = z.shape[0]
    norms = np.linalg.norm(z, axis=1)
    unit = z / norms[:, None]
    sim = unit @ unit.T / tau
    off = ~np.eye(n, dtype=bool)
    masked = np.where(off, sim, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    ex = np.where(off, np.exp(sim - mx), 0.0)
    den = ex.sum(axis=1)
    pos = np.arange(n) ^ 1
    rows = np.arange(n)
    loss = float(np.mean(-(sim[rows, pos] - mx[:, 0]) + np.log(den)))
    g = ex / den[:, None] / n
    g[rows, pos] -= 1.0 / n
    dunit = (g + g.T) @ unit / tau
    dot = np.sum(dunit * unit, axis=1, keepdims=True)
    dz = (dunit - dot * unit) / norms[:, None]
    return loss, dz


nt_xent_numba = njit(_nt_xent_loops)
nt_xent_numpy = _nt_xent_numpy
_nt_xent_impl = pick(nt_xent_numba, nt_xent_numpy)


def nt_xent_loss_grad(z, tau):
    """Mean NT-Xent over 2B interleaved rows and its gradient w.r.t. ``z``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    loss, dz = _nt_xent_impl(z, float(tau))
    return float(loss), dz


# ---------------------------------------------------------------- templates


def _template_sums_loops(feats, labels, n_classes):
    n, d = feats.shape
    sums = np.zeros((n_classes, d))
    counts = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += feats[i, k] * feats[i, k]
        nrm = math.sqrt(s)
        c = labels[i]
        counts[c] += 1
        for k in range(d):
            sums[c, k] += feats[i, k] / nrm
    return sums, counts


def _template_sums_numpy(feats, labels, n_classes):
    unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    sums = np.zeros((n_classes, feats.shape[1]))
    # sequential accumulation keeps the summation order equal to the loop form
    np.add.at(sums, labels, unit)
    counts = np.bincount(labels, minlength=n_classes).astype(np.int64)
    return sums, counts


template_sums_numba = njit(_template_sums_loops)
template_sums_numpy = _template_sums_numpy
_template_sums_impl = pick(template_sums_numba, template_sums_numpy)


def template_sums(feats, labels, n_classes):
    """Per-class sums of L2-normalised rows and per-class row counts."""
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _template_sums_impl(feats, labels, int(n_classes))


# ---------------------------------------------------------------- cosine


def _rowwise_cosine_loops(a, b):
    n, d = a.shape
    out = np.empty(n)
    for i in range(n):
        ab = 0.0
        aa = 0.0
        bb = 0.0
        for k in range(d):
            ab += a[i, k] * b[i, k]
            aa += a[i, k] * a[i, k]
            bb += b[i, k] * b[i, k]
        out[i] = ab / (math.sqrt(aa) * math.sqrt(bb))
    return out


def _rowwise_cosine_numpy(a, b):
    return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


rowwise_cosine_numba = njit(_rowwise_cosine_loops)
rowwise_cosine_numpy = _rowwise_cosine_numpy
_rowwise_cosine_impl = pick(rowwise_cosine_numba, rowwise_cosine_numpy)


def rowwise_cosine(a, b):
    """Cosine similarity between matching rows of two N×D arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _rowwise_cosine_impl(a, b)


# ---------------------------------------------------------------- confusion


def _confusion_loops(truth, pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(truth.shape[0]):
        cm[truth[i], pred[i]] += 1
    return cm


def _confusion_numpy(truth, pred, n_classes):
    flat = np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes).astype(np.int64)


confusion_numba = njit(_confusion_loops)
confusion_numpy = _confusion_numpy
_confusion_impl = pick(confusion_numba, confusion_numpy)


def confusion_counts(truth, pred, n_classes):
    truth = np.ascontiguousarray(truth, dtype=np.int64)
    pred = np.ascontiguousarray(pred, dtype=np.int64)
    return _confusion_impl(truth, pred, int(n_classes))


# ---------------------------------------------------------------- Adam


def _adam_loops(p, g, m, v, lr, b1, b2, eps, t):
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    fp = p.ravel()
    fg = g.ravel()
    fm = m.ravel()
    fv = v.ravel()
    for i in range(fp.shape[0]):
        fm[i] = b1 * fm[i] + (1.0 - b1) * fg[i]
        fv[i] = b2 * fv[i] + (1.0 - b2) * fg[i] * fg[i]
        fp[i] -= lr * (fm[i] / c1) / (math.sqrt(fv[i] / c2) + eps)


def _adam_numpy(p, g, m, v, lr, b1, b2, eps, t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / (1.0 - b1**t)) / (np.sqrt(v / (1.0 - b2**t)) + eps)


adam_numba = njit(_adam_loops)
adam_numpy = _adam_numpy
_adam_impl = pick(adam_numba, adam_numpy)


def adam_update(p, g, m, v, lr, b1, b2, eps, t):
    """In-place bias-corrected Adam update of one contiguous float64 array."""
    _adam_impl(p, np.ascontiguousarray(g, dtype=np.float64), m, v, float(lr), float(b1), float(b2), float(eps), int(t))
