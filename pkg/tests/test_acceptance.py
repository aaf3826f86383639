"""Acceptance criteria, one test per criterion (criterion 10 is split into its three clauses).

Run alone with ``pytest tests/test_acceptance.py -v``; a per-criterion
PASS/FAIL summary is printed at the end of the session.
"""
import time

import numpy as np
import pytest

from seagrid.dataset_io import GridSpec, LabeledImage, reassemble_mask, tile_image
from seagrid.ensemble import ensemble_predict, normalize_logits
from seagrid.errors import DataError
from seagrid.losses import nt_xent, softmax, weighted_ce_batch
from seagrid.metrics import ConfusionMatrix, collapse_binary, f1_score, overall_f1, per_class_metrics
from seagrid.model_core import Classifier, MLPBackbone, backbone_backward, backbone_forward, init_params
from seagrid.seaclip import SeaClipConfig, builtin_prompt_groups, generate_pseudolabels, mock_scorer, train_seaclip
from seagrid.seafeats import TemplateBank, TrainConfig, assign_pseudolabel, compute_templates, train_seafeats
from seagrid.synthetic import make_dataset

from .oracles import brute_collapse, brute_cosine, brute_nt_xent, brute_pseudolabel, brute_templates, central_difference


def _max_rel(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def _patch_f1(model, data):
    patches = [p for im in data.images for p in tile_image(im, data.grid)]
    pred = model.logits(patches).argmax(axis=1)
    truth = data.patch_truth()
    _, _, f1 = per_class_metrics(ConfusionMatrix.from_labels(truth, pred, model.num_classes))
    support = np.bincount(truth, minlength=model.num_classes)
    return 100 * overall_f1(f1, support)


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 6))
        D = int(rng.integers(2, 17))
        B = int(rng.integers(1, 5))
        bp, hp = init_params(seed, D, C, input_hw=(2, 2), hidden=(6, 5), head_hidden=8)
        for b in bp.biases + [hp.b1, hp.b2]:
            b[:] = rng.normal(0, 0.3, b.shape)
        model = Classifier(MLPBackbone(bp), hp)
        mask_seed = int(rng.integers(1 << 30))

        # weighted cross-entropy through backbone + head (dropout mask held fixed)
        X = rng.normal(0, 0.5, size=(B, 12))
        targets = rng.integers(0, C, B)
        w = rng.uniform(0.5, 2.0, C)

        def ce():
            return weighted_ce_batch(model.forward_train(None, np.random.default_rng(mask_seed), inputs=X)[0], targets, w)[0]

        logits, cache = model.forward_train(None, np.random.default_rng(mask_seed), inputs=X)
        grads = model.backward(cache, weighted_ce_batch(logits, targets, w)[1])
        for name, p in model.params().items():
            worst = max(worst, _max_rel(grads[name], central_difference(ce, p)))

        # NT-Xent over 2B backbone embeddings
        Z = rng.normal(0, 0.5, size=(2 * B, 12))

        def ntx():
            return nt_xent(backbone_forward(bp, Z)[0], 0.07)[0]

        F, bcache = backbone_forward(bp, Z, train=True)
        bgrads, _ = backbone_backward(bp, bcache, nt_xent(F, 0.07)[1])
        for name, p in bp.named().items():
            worst = max(worst, _max_rel(bgrads[name], central_difference(ntx, p)))
    elapsed = time.perf_counter() - start
    print(f"criterion 1: worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-4
    assert elapsed < 30


def test_criterion_02_template_and_pseudolabel_oracles():
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(1, 17))
        C = int(rng.integers(2, 5))
        feats = {c: rng.normal(size=(int(rng.integers(1, 101)), D)) for c in range(C)}
        bank = compute_templates(feats)
        oracle = brute_templates({c: v.tolist() for c, v in feats.items()})
        for c in range(C):
            worst = max(worst, float(np.abs(bank.row(c) - oracle[c]).max()))
        f = rng.normal(size=D)
        label = int(rng.integers(C))
        if set(bank.degenerate) & {0, label}:
            # an exactly cancelled template has no direction; the assignment refuses it
            with pytest.raises(DataError):
                assign_pseudolabel(f, bank, label)
            continue
        pl = assign_pseudolabel(f, bank, label)
        assert pl.label == brute_pseudolabel(f.tolist(), oracle, label)
        worst = max(worst, abs(pl.sim_bg - brute_cosine(f, oracle[0])), abs(pl.sim_cls - brute_cosine(f, oracle[label])))
    print(f"criterion 2: worst deviation {worst:.2e}")
    assert worst < 1e-12


def test_criterion_03_nt_xent_oracle():
    worst = 0.0
    for seed in range(300):
        rng = np.random.default_rng(seed)
        B = int(rng.integers(1, 9))
        z = rng.normal(size=(2 * B, int(rng.integers(1, 17))))
        tau = float(rng.choice([0.07, 0.5, 1.0]))
        loss, _ = nt_xent(z, tau)
        worst = max(worst, abs(loss - brute_nt_xent(z.tolist(), tau)))
        if B == 1:
            assert loss == 0.0
    print(f"criterion 3: worst deviation {worst:.2e}")
    assert worst < 1e-10
    assert nt_xent(np.random.default_rng(0).normal(size=(2, 5)))[0] == 0.0


def test_criterion_04_table_f1_reproduction():
    start = time.perf_counter()
    rows = {
        "Background": (97.47, 92.59, 94.97),
        "Ferny": (92.19, 98.89, 95.42),
        "Rounded": (93.50, 95.92, 94.69),
        "Strappy": (97.57, 95.06, 96.29),
    }
    for name, (p, r, printed) in rows.items():
        got = 100 * f1_score(p / 100, r / 100)
        print(f"criterion 4: {name} F1 {got:.3f} vs printed {printed}")
        assert abs(got - printed) <= 0.02
    assert time.perf_counter() - start < 1


def test_criterion_05_ensemble_invariants():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 3, size=(10_000, 4))
    b = rng.normal(0, 3, size=(10_000, 4))
    base = ensemble_predict(a, b)
    sa = rng.uniform(0.01, 100, size=(10_000, 1))
    sb = rng.uniform(0.01, 100, size=(10_000, 1))
    d_scale = max(np.abs(ensemble_predict(sa * a, b) - base).max(), np.abs(ensemble_predict(a, sb * b) - base).max())
    d_same = np.abs(ensemble_predict(a, a) - softmax(normalize_logits(a))).max()
    print(f"criterion 5: rescaling deviation {d_scale:.1e}, identical-member deviation {d_same:.1e}")
    assert d_scale < 1e-9 and d_same < 1e-9


def test_criterion_06_synthetic_seafeats():
    start = time.perf_counter()
    train = make_dataset(n_per_class=40, grid=GridSpec(3, 4), planted_fraction=0.25, seed=0)
    held_out = make_dataset(n_per_class=10, grid=GridSpec(3, 4), planted_fraction=0.25, seed=1, prefix="test/")
    bp, hp = init_params(0)
    model = Classifier(MLPBackbone(bp), hp, train.class_names)
    cfg = TrainConfig(epochs=20, lr=1e-3)
    res = train_seafeats(model, train.images, train.grid, cfg, np.random.default_rng(0))
    planted = train.planted_mask()
    planted_bg = float(np.mean(res.pseudolabels[planted] == 0))
    f1 = _patch_f1(model, held_out)
    elapsed = time.perf_counter() - start
    print(f"criterion 6: held-out F1 {f1:.2f}%, planted->0 {100 * planted_bg:.1f}%, {cfg.epochs} epochs, {elapsed:.1f} s")
    assert f1 >= 95
    assert planted_bg >= 0.90
    assert cfg.epochs <= 60
    assert elapsed < 120


def test_criterion_07_synthetic_seaclip():
    start = time.perf_counter()
    train = make_dataset(n_per_class=20, grid=GridSpec(3, 4), seed=2)
    held_out = make_dataset(n_per_class=10, grid=GridSpec(3, 4), seed=3, prefix="test/")
    patches = [p for im in train.images for p in tile_image(im, train.grid)]
    labelled = generate_pseudolabels(patches, mock_scorer(0), builtin_prompt_groups("deepseagrass"))
    labels = np.array([lab for _, lab in labelled])
    agreement = float(np.mean(labels == train.patch_truth()))
    bp, hp = init_params(0)
    model = Classifier(MLPBackbone(bp), hp, train.class_names)
    train_seaclip(model, patches, labels, SeaClipConfig(epochs=15, lr=1e-3), np.random.default_rng(0))
    f1 = _patch_f1(model, held_out)
    elapsed = time.perf_counter() - start
    print(f"criterion 7: pseudo-label agreement {100 * agreement:.1f}%, held-out F1 {f1:.2f}%, {elapsed:.1f} s")
    assert agreement >= 0.95
    assert f1 >= 95
    assert elapsed < 60


def test_criterion_08_binary_collapse():
    data = make_dataset(n_per_class=10, grid=GridSpec(3, 4), seed=4)
    truth = data.patch_truth()
    species_only_trials = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        pred = truth.copy()
        flip = rng.random(truth.size) < rng.uniform(0, 0.3)
        species_only = seed % 2 == 0
        if species_only:
            # errors only between seagrass species
            seagrass = truth > 0
            pred[flip & seagrass] = 1 + (truth[flip & seagrass] - 1 + rng.integers(1, 3, (flip & seagrass).sum())) % 3
        else:
            pred[flip] = rng.integers(0, 4, flip.sum())
        cm = ConfusionMatrix.from_labels(truth, pred, 4)
        binary = collapse_binary(cm, [1, 2, 3])
        assert binary.counts.tolist() == brute_collapse(cm.counts.tolist(), [1, 2, 3])
        if species_only:
            species_only_trials += 1
            multi = overall_f1(per_class_metrics(cm)[2], cm.counts.sum(axis=1))
            bin_f1 = overall_f1(per_class_metrics(binary)[2], binary.counts.sum(axis=1))
            assert bin_f1 >= multi
    print(f"criterion 8: 200 trials match the oracle; binary >= multi-class on {species_only_trials} species-only trials")


def test_criterion_09_cli_determinism(tmp_path):
    from .test_cli import run_pipeline, tree_bytes

    a = tree_bytes(run_pipeline(tmp_path / "a"))
    b = tree_bytes(run_pipeline(tmp_path / "b"))
    kinds = sorted({k.rsplit(".", 1)[-1] for k in a})
    print(f"criterion 9: {len(a)} files compared ({', '.join(kinds)})")
    assert a == b
    assert any(k.startswith("pred/") for k in a) and "report.json" in a and "sf.json" in a


def _geometry(h, w, grid):
    frame = LabeledImage(np.broadcast_to(np.zeros(1, dtype=np.float32), (h, w, 3)), 1, "frame")
    patches = tile_image(frame, grid)
    return len(patches), {p.pixels.shape[:2] for p in patches}


def test_criterion_10a_grid_geometry_2600x4624():
    n, shapes = _geometry(2600, 4624, GridSpec(5, 8))
    print(f"criterion 10a: {n} patches of {shapes}")
    assert n == 40 and shapes == {(520, 578)}


@pytest.mark.xfail(strict=True, reason="960/5 = 192 and 1920/10 = 192: no reading of a 960x1920 image at 5x10 gives 192x216 patches")
def test_criterion_10b_grid_geometry_960x1920():
    n, shapes = _geometry(960, 1920, GridSpec(5, 10))
    print(f"criterion 10b: {n} patches of {shapes}")
    assert n == 50 and shapes == {(192, 216)}


def test_criterion_10c_reassembly_round_trip():
    rng = np.random.default_rng(0)
    for rows, cols in [(5, 8), (5, 10), (1, 1), (3, 7)]:
        grid = GridSpec(rows, cols)
        probs = rng.dirichlet(np.ones(4), size=grid.size)
        mask = reassemble_mask(probs, grid, "x")
        assert mask.labels.shape == (rows, cols)
        np.testing.assert_array_equal(mask.labels.ravel(), probs.argmax(axis=1))
    print("criterion 10c: reassembly keeps the grid shape")
