"""Time each hot kernel in its numba and numpy forms on typical shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call (compilation) is excluded. Outputs of the two forms are
checked against each other before timing.
"""
import argparse
import time

import numpy as np

from seagrid import kernels as k


def _in_place(fn, args):
    out = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
    fn(*out)
    return out[0]


def _cases(rng):
    img = rng.uniform(size=(520, 578, 3))
    z_small = rng.normal(size=(16, 64))
    z = rng.normal(size=(64, 64))
    feats = rng.normal(size=(4000, 64))
    labels = rng.integers(0, 4, 4000)
    truth = rng.integers(0, 4, 200_000)
    pred = rng.integers(0, 4, 200_000)
    p = rng.normal(size=200_000)
    g = rng.normal(size=200_000)
    return {
        "bilinear 520x578 -> 16x16": (k.bilinear_resize_numba, k.bilinear_resize_numpy, (img, 16, 16)),
        "nt_xent 2B=16, D=64": (k.nt_xent_numba, k.nt_xent_numpy, (z_small, 0.07)),
        "nt_xent 2B=64, D=64": (k.nt_xent_numba, k.nt_xent_numpy, (z, 0.07)),
        "template_sums 4000x64": (k.template_sums_numba, k.template_sums_numpy, (feats, labels, 4)),
        "rowwise_cosine 4000x64": (k.rowwise_cosine_numba, k.rowwise_cosine_numpy, (feats, feats[::-1].copy())),
        "confusion 200k labels": (k.confusion_numba, k.confusion_numpy, (truth, pred, 4)),
        "adam 200k params": (
            lambda *a: _in_place(k.adam_numba, a),
            lambda *a: _in_place(k.adam_numpy, a),
            (p, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1),
        ),
    }


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-9, atol=1e-12) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, (fast, ref, fargs) in _cases(rng).items():
        t0 = time.perf_counter()
        out_fast = fast(*fargs)
        compile_s = time.perf_counter() - t0
        if not _same(out_fast, ref(*fargs)):
            raise SystemExit(f"{name}: numba and numpy outputs disagree")
        tf = _best(fast, fargs, args.repeat)
        tn = _best(ref, fargs, args.repeat)
        print(f"{name:28} {1e3 * tf:10.3f} {1e3 * tn:10.3f} {tn / tf:7.1f}x   (first call {compile_s:.2f} s)")


if __name__ == "__main__":
    main()
