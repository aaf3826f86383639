"""Command-line pipeline: pretrain, pseudolabel, train, infer, eval, finetune.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config
from .dataset_io import (
    IMAGE_SUFFIXES,
    MANIFEST_NAME,
    AugConfig,
    GridSpec,
    LabeledImage,
    color_correct,
    decode_image,
    load_dataset,
    load_mask_json,
    mask_filename,
    read_manifest,
    render_mask_png,
    save_mask_json,
    tile_image,
)
from .ensemble import EnsembleConfig, predict_mask
from .errors import DataError, NumericError
from .kernels import bilinear_resize
from .metrics import ConfusionMatrix, MetricReport, collapse, collapse_binary
from .model_core import Classifier, MLPBackbone, init_params
from .optimizer import AdamState
from .pretext import PretextConfig, pretrain
from .seaclip import (
    FISH,
    SeaClipConfig,
    builtin_prompt_groups,
    generate_pseudolabels,
    load_prompt_groups,
    load_score_matrix,
    mock_scorer,
    train_seaclip,
)
from .seafeats import TrainConfig, assign_pseudolabels, bank_from_patches, save_bank_csv, train_seafeats

log = logging.getLogger("seagrid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FISH_NAME = "Fish"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _setup_logging() -> None:
    level = os.environ.get("SEAGRID_LOG", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    root = logging.getLogger("seagrid")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(levels[level])


def _class_names(data: Path, cfg: Config) -> list[str]:
    manifest = data / MANIFEST_NAME
    if manifest.is_file():
        return read_manifest(manifest)
    if cfg.classes:
        return list(cfg.classes)
    raise DataError(f"no {MANIFEST_NAME} in {data} and no 'classes' in the config")


def _prepare(image: LabeledImage, cfg: Config) -> LabeledImage:
    if cfg.color_correct:
        image = color_correct(image)
    if cfg.resize != "none":
        h, w = (int(x) for x in cfg.resize.lower().split("x"))
        image = LabeledImage(bilinear_resize(image.pixels, h, w), image.label, image.source_id)
    return image


def _load_images(data: str, cfg: Config, class_names: list[str] | None = None):
    root = Path(data)
    names = class_names or _class_names(root, cfg)
    images = [_prepare(im, cfg) for im in load_dataset(root, names)]
    return images, names


def _patches(images, grid):
    return [p for im in images for p in tile_image(im, grid)]


def _outlier_names(names: list[str], cfg: Config) -> list[str]:
    if cfg.outlier and FISH_NAME not in names:
        return names + [FISH_NAME]
    return names


def _fresh_model(cfg: Config, names: list[str]) -> Classifier:
    bp, hp = init_params(
        cfg.seed,
        cfg.feature_dim,
        len(names),
        input_hw=cfg.input_size,
        hidden=cfg.hidden,
        head_hidden=cfg.head_hidden,
        dropout_p=cfg.dropout,
    )
    return Classifier(MLPBackbone(bp), hp, list(names))


def _model_from_init(init: str | None, cfg: Config, names: list[str]) -> Classifier:
    model = _fresh_model(cfg, names)
    if init is None:
        return model
    pre = load_checkpoint(init).model
    if pre.backbone.params.feature_dim != cfg.feature_dim:
        raise DataError(f"checkpoint {init} has feature dim {pre.backbone.params.feature_dim}, config asks for {cfg.feature_dim}")
    # the encoder comes from the checkpoint; the head is re-initialised for this class set
    model.backbone = pre.backbone
    return model


def _weights(cfg: Config, n_classes: int) -> tuple[float, ...]:
    w = tuple(cfg.class_weights)
    if len(w) == n_classes:
        return w
    if len(w) == n_classes - 1:
        # outlier mode appends the fish class; it gets unit weight
        return w + (1.0,)
    raise ConfigError(f"{len(w)} class weights configured for {n_classes} classes")


def _groups(args, cfg: Config):
    if getattr(args, "prompts", None):
        return load_prompt_groups(args.prompts)
    scenario = "global_wetlands" if cfg.outlier and cfg.scenario == "deepseagrass" else cfg.scenario
    groups = builtin_prompt_groups(scenario)
    if not cfg.outlier:
        groups = [g for g in groups if g.group_id != FISH]
    return groups


def _seaclip_labels(args, cfg: Config, patches, names: list[str]):
    groups = _groups(args, cfg)
    fish = names.index(FISH_NAME) if FISH_NAME in names else None
    if any(g.group_id == FISH for g in groups) and fish is None:
        raise ConfigError("fish prompts need outlier = true")
    scorer = load_score_matrix(args.scores, groups) if getattr(args, "scores", None) else mock_scorer(args.seed)
    return [lab for _, lab in generate_pseudolabels(patches, scorer, groups, fish_class=fish)]


def _write_jsonl(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_labels_jsonl(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[(rec["source_id"], int(rec["row"]), int(rec["col"]))] = int(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad pseudo-label record: {exc}") from exc
    return out


def _cfg(args) -> Config:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    args.seed = cfg.seed
    return cfg


# ---------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    cfg = _cfg(args)
    images, names = _load_images(args.data, cfg)
    patches = _patches(images, cfg.grid)
    model = _fresh_model(cfg, _outlier_names(names, cfg))
    pcfg = PretextConfig(
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch,
        lr=cfg.pretrain_lr,
        tau=cfg.tau,
        crop_fraction=cfg.crop_fraction,
    )
    adam = AdamState(lr=cfg.pretrain_lr)
    _, curve = pretrain(model.backbone.params, patches, pcfg, np.random.default_rng(cfg.seed), adam)
    meta = {"stage": "pretrain", "seed": cfg.seed, "loss_curve": curve}
    save_checkpoint(Checkpoint(model, cfg.grid, adam, meta), args.out)
    log.info("pretrained on %d patches, final loss %.5f", len(patches), curve[-1] if curve else float("nan"))
    return EXIT_OK


def cmd_pseudolabel(args) -> int:
    cfg = _cfg(args)
    if args.engine == "seafeats":
        if not args.ckpt:
            raise UsageError("pseudolabel seafeats needs --ckpt")
        ckpt = load_checkpoint(args.ckpt)
        names = [n for n in ckpt.model.class_names if n != FISH_NAME]
        images, _ = _load_images(args.data, cfg, names)
        patches = _patches(images, ckpt.grid)
        feats = ckpt.model.features(patches)
        bank = bank_from_patches(ckpt.model, patches, cfg.template_cap or None, feats=feats)
        labels, sim_bg, sim_cls = assign_pseudolabels(feats, [p.inherited_label for p in patches], bank)
        records = [
            {"source_id": p.parent_id, "row": p.row, "col": p.col, "label": int(lab), "origin": "seafeats",
             "sim_bg": round(float(a), 9), "sim_cls": round(float(b), 9)}
            for p, lab, a, b in zip(patches, labels, sim_bg, sim_cls)
        ]
        if args.bank_out:
            save_bank_csv(bank, args.bank_out)
    else:
        images, names = _load_images(args.data, cfg)
        names = _outlier_names(names, cfg)
        patches = _patches(images, cfg.grid)
        labels = _seaclip_labels(args, cfg, patches, names)
        records = [
            {"source_id": p.parent_id, "row": p.row, "col": p.col, "label": int(lab), "origin": "seaclip"}
            for p, lab in zip(patches, labels)
        ]
    _write_jsonl(args.out, records)
    log.info("wrote %d pseudo-labels to %s", len(records), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _cfg(args)
    images, names = _load_images(args.data, cfg)
    names = _outlier_names(names, cfg)
    model = _model_from_init(args.init, cfg, names)
    rng = np.random.default_rng(cfg.seed)
    weights = _weights(cfg, len(names))
    clip = cfg.clip_norm or None
    meta = {"stage": "train", "engine": args.engine, "seed": cfg.seed, "epochs": cfg.epochs}
    if args.engine == "seafeats":
        tcfg = TrainConfig(
            epochs=cfg.epochs,
            lr=cfg.lr,
            batch_images=cfg.batch_images,
            class_weights=weights,
            template_cap=cfg.template_cap or None,
            clip_norm=clip,
        )
        result = train_seafeats(model, images, cfg.grid, tcfg, rng)
        adam = result.adam
        meta["stats"] = [s.to_dict() for s in result.stats]
        if args.log:
            _write_jsonl(args.log, meta["stats"])
    else:
        patches = _patches(images, cfg.grid)
        if args.labels:
            table = _read_labels_jsonl(args.labels)
            missing = [p.key for p in patches if p.key not in table]
            if missing:
                raise DataError(f"{len(missing)} patches have no pseudo-label, e.g. {missing[0]}")
            labels = [table[p.key] for p in patches]
        else:
            labels = _seaclip_labels(args, cfg, patches, names)
        scfg = SeaClipConfig(epochs=cfg.epochs, lr=cfg.lr, batch_patches=cfg.batch_patches, class_weights=weights, clip_norm=clip)
        _, history, adam = train_seaclip(model, patches, labels, scfg, rng)
        meta["loss_curve"] = history
        if args.log:
            _write_jsonl(args.log, [{"epoch": i + 1, "loss": v} for i, v in enumerate(history)])
    save_checkpoint(Checkpoint(model, cfg.grid, adam, meta), args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _cfg(args)
    ckpt = load_checkpoint(args.ckpt)
    names = [n for n in ckpt.model.class_names if n != FISH_NAME]
    images, _ = _load_images(args.data, cfg, names)
    shots = args.shots if args.shots is not None else cfg.finetune_shots
    chosen = [im for im in images if im.label == 0][:shots] + [im for im in images if im.label != 0][:shots]
    grid = GridSpec.parse(args.grid) if args.grid else ckpt.grid
    tcfg = TrainConfig(
        epochs=args.epochs,
        lr=cfg.finetune_lr,
        batch_images=cfg.batch_images,
        class_weights=_weights(cfg, ckpt.model.num_classes),
        augment=AugConfig.finetune(),
    )
    result = train_seafeats(ckpt.model, chosen, grid, tcfg, np.random.default_rng(cfg.seed))
    meta = {"stage": "finetune", "seed": cfg.seed, "epochs": args.epochs, "images": len(chosen),
            "stats": [s.to_dict() for s in result.stats]}
    save_checkpoint(Checkpoint(ckpt.model, grid, result.adam, meta), args.out)
    return EXIT_OK


def _inference_inputs(args) -> list[tuple[Path, str]]:
    if args.image:
        p = Path(args.image)
        return [(p, p.name)]
    root = Path(args.dir)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images under {root}")
    return [(p, p.relative_to(root).as_posix()) for p in files]


def cmd_infer(args) -> int:
    cfg = _cfg(args)
    grid = GridSpec.parse(args.grid)
    model_a = load_checkpoint(args.ckpt_a).model
    model_b = load_checkpoint(args.ckpt_b).model if args.ckpt_b else None
    if model_b is not None and model_b.class_names != model_a.class_names:
        raise DataError("ensemble members were trained on different class manifests")
    ens = EnsembleConfig(tuple(cfg.ensemble_weights), cfg.ensemble_mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = _inference_inputs(args)

    def run_one(item):
        path, sid = item
        image = _prepare(LabeledImage(decode_image(path), 0, sid), cfg)
        mask = predict_mask(image, grid, model_a, model_b, ens)
        stem = mask_filename(sid)
        save_mask_json(mask, out / stem)
        if args.png:
            render_mask_png(mask, out / (stem[: -len(".json")] + ".png"))
        return sid

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(run_one, items))
    else:
        done = [run_one(it) for it in items]
    log.info("wrote %d masks to %s", len(done), out)
    return EXIT_OK


def _load_masks(folder: str) -> dict:
    root = Path(folder)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    masks = {}
    for path in sorted(root.glob("*.json")):
        m = load_mask_json(path)
        key = m.source_id or path.stem
        if key in masks:
            raise DataError(f"duplicate mask for {key!r} in {root}")
        masks[key] = m
    if not masks:
        raise DataError(f"no mask JSON files in {root}")
    return masks


def cmd_eval(args) -> int:
    if args.binary and args.outlier:
        raise UsageError("--binary and --outlier are mutually exclusive")
    pred = _load_masks(args.pred)
    truth = _load_masks(args.truth)
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise DataError(f"{len(missing)} ground-truth masks have no prediction, e.g. {missing[0]!r}")
    t_all, p_all = [], []
    for key in sorted(truth):
        t, p = truth[key].labels, pred[key].labels
        if t.shape != p.shape:
            raise DataError(f"{key!r}: prediction grid {p.shape} != truth grid {t.shape}")
        t_all.append(t.ravel())
        p_all.append(p.ravel())
    t_all, p_all = np.concatenate(t_all), np.concatenate(p_all)
    if args.classes:
        names = read_manifest(args.classes)
    else:
        n = int(max(t_all.max(), p_all.max())) + 1
        names = [f"class{i}" for i in range(n)]
        names[0] = "Background"
    if args.outlier and FISH_NAME not in names:
        names = names + [FISH_NAME]
    n_classes = len(names)
    if max(t_all.max(), p_all.max()) >= n_classes:
        raise DataError(f"mask labels exceed the {n_classes} known classes")
    cm = ConfusionMatrix.from_labels(t_all, p_all, n_classes)
    mode = "multiclass"
    if args.binary:
        cm = collapse_binary(cm, list(range(1, n_classes)))
        names, mode = ["Background", "Seagrass"], "binary"
    elif args.outlier:
        fish = names.index(FISH_NAME)
        species = [i for i in range(1, n_classes) if i != fish]
        cm = collapse(cm, [(0, [0]), (1, species), (2, [fish])])
        names, mode = ["Background", "Seagrass", FISH_NAME], "outlier"
    report = MetricReport.from_confusion(cm, names)
    doc = report.to_dict()
    doc["mode"] = mode
    Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seagrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"seagrid {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if config:
            p.add_argument("--config", help="flat key = value config file")

    p = sub.add_parser("pretrain", help="contrastive pretraining of the encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("pseudolabel", help="write patch pseudo-labels as JSON lines")
    p.add_argument("engine", choices=["seafeats", "seaclip"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="encoder checkpoint (seafeats)")
    p.add_argument("--scores", help="precomputed prompt-score CSV (seaclip); mock scorer if omitted")
    p.add_argument("--prompts", help="prompt-group JSON (seaclip)")
    p.add_argument("--bank-out", help="also write the template bank CSV (seafeats)")
    common(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("train", help="train a patch classifier from image-level labels")
    p.add_argument("engine", choices=["seafeats", "seaclip"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="checkpoint whose encoder initialises the model")
    p.add_argument("--labels", help="pseudo-label JSON lines (seaclip)")
    p.add_argument("--scores", help="prompt-score CSV (seaclip)")
    p.add_argument("--prompts", help="prompt-group JSON (seaclip)")
    p.add_argument("--log", help="per-epoch stats as JSON lines")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict coarse masks")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--dir")
    p.add_argument("--grid", required=True, help="RxC, e.g. 5x8")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write colour PNG masks")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--classes", help="class manifest (one name per line)")
    p.add_argument("--binary", action="store_true", help="collapse all seagrass classes")
    p.add_argument("--outlier", action="store_true", help="background / seagrass / fish evaluation")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="few-shot fine-tuning of a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int, default=None, help="images per side (background / seagrass)")
    p.add_argument("--grid", help="override the checkpoint grid")
    common(p)
    p.set_defaults(func=cmd_finetune)
    return parser


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except ConfigError as exc:
        print(f"seagrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"seagrid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"seagrid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"seagrid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
