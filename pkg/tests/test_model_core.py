import numpy as np
import pytest

from seagrid.dataset_io import Patch
from seagrid.errors import DataError, NumericError
from seagrid.losses import weighted_ce_batch
from seagrid.model_core import (
    BackboneParams,
    Classifier,
    MLPBackbone,
    PrecomputedBackbone,
    backbone_backward,
    backbone_forward,
    extract_features,
    head_forward,
    init_params,
    load_precomputed_features,
    model_backward,
    patch_inputs,
    write_feature_csv,
)

from .oracles import central_difference, rel_error


def _tiny(seed, D=4, C=3, dropout=0.15):
    bp, hp = init_params(seed, D, C, input_hw=(2, 2), hidden=(5, 4), head_hidden=6, dropout_p=dropout)
    rng = np.random.default_rng(seed + 100)
    for b in bp.biases + [hp.b1, hp.b2]:
        b[:] = rng.normal(0, 0.3, b.shape)
    return bp, hp


class TestInit:
    def test_deterministic(self):
        a = init_params(3, 8, 4, hidden=(16, 8), head_hidden=10)
        b = init_params(3, 8, 4, hidden=(16, 8), head_hidden=10)
        for x, y in zip(a[0].weights + [a[1].W1, a[1].W2], b[0].weights + [b[1].W1, b[1].W2]):
            assert x.tobytes() == y.tobytes()

    def test_zeros(self):
        bp, hp = init_params(0, 4, 2, scheme="zeros", hidden=(3,), head_hidden=5)
        for arr in bp.weights + bp.biases + [hp.W1, hp.b1, hp.W2, hp.b2]:
            assert not arr.any()

    def test_fan_in_bound(self):
        # second layer has fan-in 100; 10^6 draws
        bp, _ = init_params(2, 4, 2, input_hw=(1, 1), hidden=(100, 10_000), head_hidden=2)
        w = bp.weights[1]
        assert w.shape == (100, 10_000)
        assert np.abs(w).max() <= np.sqrt(6 / 100) <= 0.245
        assert np.abs(w).max() > 0.99 * np.sqrt(6 / 100)

    def test_shapes(self):
        bp, hp = init_params(0)
        assert [w.shape for w in bp.weights] == [(768, 256), (256, 128), (128, 64)]
        assert hp.W1.shape == (64, 512) and hp.W2.shape == (512, 4)
        assert hp.dropout_p == 0.15

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_params(0, 0, 3)


class TestFeatures:
    def test_zero_backbone_gives_zero_features(self, patch):
        bp, _ = init_params(0, 6, 2, scheme="zeros")
        f, cache = extract_features(bp, patch)
        assert cache is None
        assert not f.any()

    def test_identical_patches_identical_features(self, patch):
        bp, _ = init_params(0, 6, 2)
        twin = patch.with_pixels(patch.pixels.copy())
        a, _ = extract_features(bp, patch)
        b, _ = extract_features(bp, twin)
        assert a.tobytes() == b.tobytes()

    def test_training_mode_returns_cache(self, patch):
        bp, _ = init_params(0, 6, 2)
        _, cache = extract_features(bp, patch, mode="train")
        assert cache is not None and len(cache.activations) == 4

    def test_single_linear_layer_matches_matmul(self, rng):
        W = rng.normal(size=(12, 5))
        b = rng.normal(size=5)
        bp = BackboneParams([W], [b], (2, 2))
        px = rng.uniform(size=(2, 2, 3))
        f, _ = extract_features(bp, Patch(px, 0, 0, "x", 0))
        x = px.reshape(-1) - 0.5
        expected = [sum(x[i] * W[i, j] for i in range(12)) + b[j] for j in range(5)]
        np.testing.assert_allclose(f, expected, atol=1e-12)

    def test_downsampling(self, rng):
        big = Patch(rng.uniform(size=(40, 33, 3)), 0, 0, "x", 0)
        X = patch_inputs([big], (16, 16))
        assert X.shape == (1, 768)

    def test_non_finite_raises(self, patch):
        bp, _ = init_params(0, 6, 2)
        bp.weights[0][:] = np.nan
        with pytest.raises(NumericError):
            extract_features(bp, patch)


class TestHead:
    def test_no_dropout_train_equals_eval(self, rng):
        _, hp = init_params(0, 6, 3, dropout_p=0.0, head_hidden=9)
        f = rng.normal(size=6)
        a, _ = head_forward(hp, f, "eval")
        b, cache = head_forward(hp, f, "train", rng)
        np.testing.assert_array_equal(a, b)
        assert cache is not None

    def test_zero_weights_give_bias(self, rng):
        _, hp = init_params(0, 6, 3, scheme="zeros", head_hidden=9)
        hp.b2[:] = [1.0, -2.0, 0.5]
        logits, _ = head_forward(hp, rng.normal(size=6), "eval")
        np.testing.assert_array_equal(logits, [1.0, -2.0, 0.5])

    def test_eval_matches_hand_computation(self, rng):
        _, hp = init_params(4, 5, 3, head_hidden=7)
        hp.b1[:] = rng.normal(size=7)
        hp.b2[:] = rng.normal(size=3)
        f = rng.normal(size=5)
        logits, _ = head_forward(hp, f, "eval")
        hidden = [max(0.0, sum(f[i] * hp.W1[i, j] for i in range(5)) + hp.b1[j]) for j in range(7)]
        expected = [sum(hidden[j] * hp.W2[j, k] for j in range(7)) + hp.b2[k] for k in range(3)]
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_eval_is_pure(self, rng):
        _, hp = init_params(4, 5, 3, head_hidden=7)
        f = rng.normal(size=(4, 5))
        a, _ = head_forward(hp, f, "eval")
        b, _ = head_forward(hp, f, "eval")
        assert a.tobytes() == b.tobytes()

    def test_inverted_dropout_preserves_mean(self):
        # one hidden unit of constant activation, 10^5 masks
        _, hp = init_params(0, 1, 1, scheme="zeros", head_hidden=100_000, dropout_p=0.15)
        hp.W1[:] = 1.0
        hp.W2[:] = 1.0 / 100_000
        logits, cache = head_forward(hp, np.array([2.0]), "train", np.random.default_rng(0))
        masked = cache.hidden[0]
        assert masked.mean() == pytest.approx(2.0, rel=0.01)
        assert logits[0] == pytest.approx(2.0, rel=0.01)
        assert set(np.unique(cache.mask)) == {0.0, 1 / 0.85}

    def test_train_needs_rng(self, rng):
        _, hp = init_params(0, 3, 2, head_hidden=4)
        with pytest.raises(ValueError):
            head_forward(hp, rng.normal(size=3), "train")

    def test_dim_mismatch(self, rng):
        _, hp = init_params(0, 3, 2, head_hidden=4)
        with pytest.raises(ValueError):
            head_forward(hp, rng.normal(size=4))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, rng):
        bp, hp = _tiny(0)
        model = Classifier(MLPBackbone(bp), hp)
        X = rng.normal(size=(3, 12))
        _, cache = model.forward_train(None, rng, inputs=X)
        grads, dX = model_backward(cache, np.zeros((3, 3)), hp, bp)
        assert all(not g.any() for g in grads.values())
        assert not dX.any()

    def test_eval_cache_rejected(self):
        _, hp = _tiny(0)
        with pytest.raises(ValueError):
            model_backward(None, np.zeros(3), hp)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        bp, hp = _tiny(seed)
        model = Classifier(MLPBackbone(bp), hp)
        rng = np.random.default_rng(seed)
        X = rng.normal(0, 0.5, size=(4, 12))
        targets = rng.integers(0, 3, 4)
        weights = rng.uniform(0.5, 2.0, 3)
        mask_seed = int(rng.integers(1 << 30))

        def loss():
            logits, _ = model.forward_train(None, np.random.default_rng(mask_seed), inputs=X)
            return weighted_ce_batch(logits, targets, weights)[0]

        logits, cache = model.forward_train(None, np.random.default_rng(mask_seed), inputs=X)
        _, d = weighted_ce_batch(logits, targets, weights)
        grads, dX = model_backward(cache, d, hp, bp)
        for name, p in model.params().items():
            numeric = central_difference(loss, p)
            assert rel_error(grads[name], numeric).max() < 1e-4, name
        assert rel_error(dX, central_difference(loss, X)).max() < 1e-4

    def test_backward_reproducible(self):
        bp, hp = _tiny(1)
        model = Classifier(MLPBackbone(bp), hp)
        X = np.random.default_rng(0).normal(size=(5, 12))
        runs = []
        for _ in range(2):
            logits, cache = model.forward_train(None, np.random.default_rng(42), inputs=X)
            grads = model.backward(cache, np.ones_like(logits))
            runs.append(b"".join(grads[k].tobytes() for k in sorted(grads)))
        assert runs[0] == runs[1]

    def test_backbone_backward_input_grad(self, rng):
        bp, _ = _tiny(2)
        X = rng.normal(size=(2, 12))
        G = rng.normal(size=(2, 4))

        def f():
            return float(np.sum(backbone_forward(bp, X)[0] * G))

        _, cache = backbone_forward(bp, X, train=True)
        _, dX = backbone_backward(bp, cache, G)
        assert rel_error(dX, central_difference(f, X)).max() < 1e-4


class TestFeatureCsv:
    def test_one_row(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("source_id,row,col,f0,f1,f2,f3\nimg.png,0,1,1.5,2,3,4\n")
        table = load_precomputed_features(p)
        np.testing.assert_array_equal(table[("img.png", 0, 1)], [1.5, 2, 3, 4])

    def test_mixed_dims_name_line(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("source_id,row,col,f0,f1,f2,f3\na,0,0,1,2,3,4\nb,0,0,1,2,3,4,5\n")
        with pytest.raises(DataError, match=":3:"):
            load_precomputed_features(p)

    def test_parse_failure_names_line(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("source_id,row,col,f0\na,0,0,abc\n")
        with pytest.raises(DataError, match=":2:"):
            load_precomputed_features(p)

    def test_round_trip(self, tmp_path, rng):
        rows = [(f"img{i // 10}.png", i % 10 // 5, i % 5, rng.normal(size=7) * 10 ** rng.uniform(-5, 5)) for i in range(100)]
        write_feature_csv(tmp_path / "f.csv", rows)
        table = load_precomputed_features(tmp_path / "f.csv")
        assert len(table) == 100
        for sid, r, c, v in rows:
            got = table[(sid, r, c)]
            assert [f"{x:.9g}" for x in got] == [f"{x:.9g}" for x in v]
            np.testing.assert_array_equal(got, v)

    def test_precomputed_backbone_lookup(self, tmp_path):
        table = {("a", 0, 0): np.array([1.0, 2.0]), ("a", 0, 1): np.array([3.0, 4.0])}
        bb = PrecomputedBackbone(table)
        patches = [Patch(np.zeros((2, 2, 3)), 0, c, "a", 1) for c in (0, 1)]
        np.testing.assert_array_equal(bb.features(patches), [[1, 2], [3, 4]])
        with pytest.raises(DataError, match=r"a\[0,5\]"):
            bb.features([Patch(np.zeros((2, 2, 3)), 0, 5, "a", 1)])
