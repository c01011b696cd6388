"""Command-line surface: generate | augment | train | evaluate | explain | report.

One JSON run-configuration file drives everything; per-command flags
override file values. All randomness is derived from the config's root
seed through named streams, so re-running any command with the same
inputs rewrites identical artifacts.

Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence. Errors
print a single machine-parsable line to stderr: ``error: <kind>: <detail>``.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, upsample_and_augment
from .dataset import (
    DEFAULT_IMAGE_SIZE,
    Dataset,
    generate_dataset,
    load_manifest,
    save_dataset,
)
from .errors import DataError, DivergedError
from .explain import attention_heatmap, grad_cam, overlay, side_by_side, write_image
from .fusion import INPUT_CHANNELS, INPUT_TYPES, batch_to_input, ir_to_falsecolor, sample_to_input
from .metrics import pr_auc, roc_auc
from .models import FAMILIES, ModelSpec, load_checkpoint, save_checkpoint
from .report import format_table, write_report
from .seeding import derive_seed
from .trainer import (
    TrainConfig,
    VARIANTS,
    check_family_input,
    predict_scores,
    run_experiment,
    split_dataset,
)

CONFIG_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "seed": 1041,
    "dataset": {"baseline": 412, "runaway": 420, "image_size": DEFAULT_IMAGE_SIZE},
    "ir_range": [20.0, 90.0],
    "split_fractions": [0.70, 0.15, 0.15],
    "augment": {
        "p_step": 0.5,
        "fixed_rotation_deg": 25.0,
        "affine_rotation_deg": 15.0,
        "affine_scale": [0.9, 1.1],
        "affine_shear_deg": 10.0,
        "blur_sigma": [0.5, 1.5],
        "salt_pepper_fraction": 0.02,
    },
    "train": {
        "epochs": 10,
        "batch_size": 16,
        "optimizer": "adam",
        "lr": 1e-3,
        "momentum": 0.9,
        "warmup_epochs": 1.0,
        "upsample_factor": 2,
    },
    "models": {
        "cnn": {"conv_widths": [8, 16], "fc_hidden": 32},
        "resnet": {
            "stem_width": 8,
            "block_widths": [8, 16, 16, 32],
            "block_strides": [1, 2, 1, 2],
            "head_hidden": 32,
        },
        "vit": {"patch_size": 16, "embed_dim": 128, "depth": 4, "heads": 4, "mlp_hidden": 256},
    },
    "grids": {
        "cnn": {"lr": [1e-2, 1e-3], "optimizer": ["adam"]},
        "resnet": {"lr": [1e-2, 1e-3], "optimizer": ["adam", "sgd"]},
        "vit": {"lr": [3e-4, 1e-3], "optimizer": ["adam"]},
    },
}


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None):
    cfg = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        try:
            with open(p) as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"malformed config {p}: {e}") from e
        if not isinstance(user, dict):
            raise ValueError(f"config {p} must be a JSON object")
        if user.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported config schema {user.get('schema_version')} in {p}"
            )
        cfg = _merge(cfg, user)
    return cfg


def _augment_config(cfg, seed):
    a = dict(cfg["augment"])
    a["affine_scale"] = tuple(a["affine_scale"])
    a["blur_sigma"] = tuple(a["blur_sigma"])
    return AugmentConfig(seed=seed, **a).validate()


def _model_spec(cfg, family, input_type, variant, image_size):
    over = dict(cfg["models"].get(family, {}))
    for k in ("conv_widths", "block_widths", "block_strides"):
        if k in over:
            over[k] = tuple(over[k])
    return ModelSpec(
        family=family,
        in_channels=INPUT_CHANNELS[input_type],
        image_size=image_size,
        init_seed=derive_seed(cfg["seed"], "init", family, input_type, variant),
        **over,
    )


def _train_config(cfg, family, input_type, variant):
    return TrainConfig(
        input_type=input_type,
        variant=variant,
        seed=derive_seed(cfg["seed"], "row", family, input_type, variant),
        **cfg["train"],
    ).validate()


def _resolve_input_type(args, checkpoint_path, in_channels):
    """Input type from --input, or the run.json beside the checkpoint."""
    if getattr(args, "input", None):
        return args.input
    run_meta = Path(checkpoint_path).parent / "run.json"
    if run_meta.exists():
        with open(run_meta) as f:
            meta = json.load(f)
        it = meta.get("row", {}).get("input_type")
        if it in INPUT_TYPES:
            return it
    if in_channels == 6:
        return "fusion"
    raise ValueError(
        "cannot tell optical from infrared input for this checkpoint; pass --input"
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else derive_seed(cfg["seed"], "dataset")
    baseline = args.baseline if args.baseline is not None else cfg["dataset"]["baseline"]
    runaway = args.runaway if args.runaway is not None else cfg["dataset"]["runaway"]
    size = args.size if args.size is not None else cfg["dataset"]["image_size"]
    ds = generate_dataset(seed, baseline, runaway, size)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({baseline} baseline, {runaway} runaway) to {path}")
    return 0


def cmd_augment(args):
    cfg = load_config(args.config)
    ds = load_manifest(args.manifest)
    seed = args.seed if args.seed is not None else derive_seed(cfg["seed"], "augment")
    train_ids = [s.sample_id for s in ds.samples if s.split == "train"]
    if not train_ids:
        split = split_dataset(
            ds, tuple(cfg["split_fractions"]), derive_seed(cfg["seed"], "split")
        )
        train_ids = split.train_ids
    sub = ds.subset(train_ids)
    for s in sub.samples:
        s.split = "train"
    aug = upsample_and_augment(sub, args.factor, _augment_config(cfg, seed))
    for s in aug.samples:
        s.split = "train"
    path = save_dataset(aug, args.out)
    print(f"wrote {len(aug)} augmented training samples to {path}")
    return 0


def cmd_train(args):
    check_family_input(args.family, args.input)
    cfg = load_config(args.config)
    ds = load_manifest(args.manifest)
    spec = _model_spec(cfg, args.family, args.input, args.variant, ds.image_size)
    config = _train_config(cfg, args.family, args.input, args.variant)
    row, model, details = run_experiment(
        ds,
        args.family,
        args.input,
        args.variant,
        grid=cfg["grids"][args.family],
        spec=spec,
        config=config,
        aug_config=_augment_config(cfg, derive_seed(cfg["seed"], "augment")),
        split_seed=derive_seed(cfg["seed"], "split"),
        ir_range=tuple(cfg["ir_range"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.bin")
    run_payload = {
        "schema_version": 1,
        "row": row,
        "best_params": details["best_params"],
        "grid_results": details["grid_results"],
        "split_sizes": details["split_sizes"],
    }
    with open(out / "run.json", "w") as f:
        json.dump(run_payload, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "timing.json", "w") as f:
        json.dump(details["timing"], f, indent=2, sort_keys=True)
        f.write("\n")
    print(
        f"{row['model']} {args.input} {args.variant}: "
        f"ROC-AUC {row['roc_auc']:.3f} PR-AUC {row['pr_auc']:.3f} -> {out}"
    )
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    input_type = _resolve_input_type(args, args.checkpoint, model.spec.in_channels)
    split = split_dataset(ds, tuple(cfg["split_fractions"]), derive_seed(cfg["seed"], "split"))
    test = ds.subset(split.test_ids)
    inputs = batch_to_input(test.samples, input_type, tuple(cfg["ir_range"]))
    labels = np.array([s.label for s in test.samples], dtype=np.int64)
    scores = predict_scores(model, inputs)
    result = {
        "input_type": input_type,
        "n_test": int(len(labels)),
        "roc_auc": float(roc_auc(scores, labels)),
        "pr_auc": float(pr_auc(scores, labels)),
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_explain(args):
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    ds = load_manifest(args.manifest)
    try:
        sample = ds.by_id(args.sample)
    except KeyError:
        raise DataError(f"sample id {args.sample!r} not in manifest") from None
    input_type = _resolve_input_type(args, args.checkpoint, model.spec.in_channels)
    ir_range = tuple(cfg["ir_range"])
    x = sample_to_input(sample, input_type, ir_range)
    if model.spec.family == "vit":
        hm = attention_heatmap(model, x, layer=args.layer)
    else:
        hm = grad_cam(model, x, target=args.target)
    out = Path(args.out)
    written = []
    written.append(write_image(out / f"{args.sample}_overlay.png", overlay(hm, sample.optical)))
    written.append(write_image(out / f"{args.sample}_panel.png", side_by_side(sample.optical, hm)))
    if input_type in ("infrared", "fusion"):
        ir_rgb = ir_to_falsecolor(sample.infrared, *ir_range)
        written.append(write_image(out / f"{args.sample}_ir_overlay.png", overlay(hm, ir_rgb)))
        written.append(write_image(out / f"{args.sample}_ir_panel.png", side_by_side(ir_rgb, hm)))
    for p in written:
        print(p)
    return 0


def cmd_report(args):
    runs = Path(args.runs)
    if not runs.is_dir():
        raise DataError(f"runs directory not found: {runs}")
    rows = []
    for run_file in sorted(runs.glob("*/run.json")):
        with open(run_file) as f:
            payload = json.load(f)
        rows.append(payload["row"])
    if not rows:
        raise DataError(f"no run.json files under {runs}")
    out = Path(args.out) if args.out else runs
    jpath, tpath = write_report(out, rows)
    print(format_table(rows), end="")
    print(f"wrote {jpath} and {tpath}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cellwatch",
        description="Dual-channel thermal-runaway detection: data, training, explanation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="run-configuration JSON file")

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", type=int, default=None)
    p.add_argument("--runaway", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    add_config(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", help="write an upsampled+augmented training manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="split, grid-search, finalize one table row")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--input", required=True, choices=INPUT_TYPES)
    p.add_argument("--variant", default="upaug", choices=VARIANTS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute test metrics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--input", default=None, choices=INPUT_TYPES)
    p.add_argument("--out", default=None)
    add_config(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="write saliency overlays for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input", default=None, choices=INPUT_TYPES)
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--layer", type=int, default=-1)
    add_config(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="merge run rows into one table")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", default=None)
    add_config(p)
    p.set_defaults(func=cmd_report)

    return parser


def _fail(kind, exc, code):
    detail = " ".join(str(exc).split())
    print(f"error: {kind}: {detail}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedError as e:
        return _fail("divergence", e, 4)
    except DataError as e:
        return _fail("data", e, 3)
    except (ValueError, OSError) as e:
        return _fail("usage", e, 2)


if __name__ == "__main__":
    sys.exit(main())
