import dataclasses

import numpy as np
import pytest

from seagrid.dataset_io import AugConfig, Patch
from seagrid.model_core import init_params
from seagrid.pretext import PretextConfig, make_views, pretrain, view_config


def _backbone(seed=0):
    return init_params(seed, 8, 2, input_hw=(4, 4), hidden=(16,), head_hidden=4)[0]


def _clusters(rng, n=8):
    green = [np.clip(np.array([0.1, 0.7, 0.2]) + rng.normal(0, 0.05, (8, 8, 3)), 0, 1) for _ in range(n)]
    sand = [np.clip(np.array([0.8, 0.7, 0.5]) + rng.normal(0, 0.05, (8, 8, 3)), 0, 1) for _ in range(n)]
    return [Patch(px, 0, i, f"p{i}", 0) for i, px in enumerate(green + sand)]


def test_identity_views_equal_input(patch, rng):
    a, b = make_views(patch, AugConfig.identity(), rng)
    np.testing.assert_array_equal(a.pixels, patch.pixels)
    np.testing.assert_array_equal(b.pixels, patch.pixels)


def test_views_reproducible(patch):
    cfg = view_config(PretextConfig(), patch.pixels.shape[:2])
    a = make_views(patch, cfg, np.random.default_rng(5))
    b = make_views(patch, cfg, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()


def test_views_differ_from_input(patch):
    rng = np.random.default_rng(0)
    shape = patch.pixels.shape[:2]
    cfg = view_config(PretextConfig(), shape)
    same = 0
    for _ in range(1000):
        for v in make_views(patch, cfg, rng):
            same += v.pixels.shape == patch.pixels.shape and np.array_equal(v.pixels, patch.pixels)
    assert same <= 20


def test_view_config_crop():
    cfg = view_config(PretextConfig(crop_fraction=0.5), (20, 30))
    assert cfg.crop_size == (10, 15)
    fixed = PretextConfig(aug=dataclasses.replace(AugConfig(), crop_size=(4, 4)))
    assert view_config(fixed, (20, 30)).crop_size == (4, 4)


def test_single_patch_batches_zero_loss(rng):
    bb = _backbone()
    _, curve = pretrain(bb, _clusters(rng, 2), PretextConfig(epochs=2, batch_size=1), rng)
    assert curve == [0.0, 0.0]
    assert all(np.isfinite(w).all() for w in bb.weights)


def test_loss_decreases_on_clusters(rng):
    patches = _clusters(rng)
    _, curve = pretrain(_backbone(), patches, PretextConfig(epochs=12, batch_size=8, lr=3e-3), np.random.default_rng(1))
    assert curve[-1] < curve[0]
    assert np.isfinite(curve).all()


def test_deterministic(rng):
    patches = _clusters(rng, 4)

    def run():
        bb, curve = pretrain(_backbone(2), patches, PretextConfig(epochs=2, batch_size=4), np.random.default_rng(7))
        return b"".join(w.tobytes() for w in bb.weights + bb.biases), curve

    assert run() == run()


def test_labels_ignored(rng):
    patches = _clusters(rng, 4)
    relabelled = [Patch(p.pixels, p.row, p.col, p.parent_id, 3) for p in patches]
    a = pretrain(_backbone(), patches, PretextConfig(epochs=2, batch_size=4), np.random.default_rng(3))[1]
    b = pretrain(_backbone(), relabelled, PretextConfig(epochs=2, batch_size=4), np.random.default_rng(3))[1]
    assert a == b


def test_needs_two_patches(patch, rng):
    with pytest.raises(ValueError):
        pretrain(_backbone(), [patch], PretextConfig(), rng)
