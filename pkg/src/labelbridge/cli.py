"""Command-line entry points.

Subcommands: gen-labels, train, eval, attack, param-count, report.  Train and
attack accept a YAML config whose key tree mirrors TrainConfig/AttackConfig;
explicit flags override file values.  Every run directory is self-contained:
config, seeds, metrics, and the code-version tag all land next to the
outputs.  The output root defaults to ./runs or $LABELBRIDGE_OUT.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np
import torch
import yaml

from . import __version__
from .attacks import FAMILIES, AttackConfig, evaluate_robustness
from .bridge import build_schedule, sample_label
from .classifier import classify_votes
from .codebook import generate_codebook, save_codebook
from .data import DataConfig, load_dataset
from .predictor import PredictorConfig, param_count
from .report import (
    read_metrics,
    save_image_grid,
    save_loss_curves,
    summarize_run,
    write_records,
)
from .training import TrainConfig, bundle_from_checkpoint, load_checkpoint, train


def _out_root():
    return os.environ.get("LABELBRIDGE_OUT", "runs")


def _parse_fraction(text):
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _parse_shape(text):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must look like 3x32x32, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_ints(text):
    return tuple(int(p) for p in text.split(","))


def _parse_pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _tuplify(obj):
    if isinstance(obj, dict):
        return {k: _tuplify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return tuple(_tuplify(v) for v in obj)
    return obj


def _load_yaml(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return _tuplify(doc)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=str)
        fh.write("\n")


# ---------------------------------------------------------------- gen-labels


def _cmd_gen_labels(args):
    codebook = generate_codebook(args.classes, args.shape, args.range, args.seed)
    out = args.out or os.path.join(_out_root(), "labels.bin")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_codebook(codebook, out)
    print(f"wrote {codebook.num_classes} labels of shape {codebook.label_shape} to {out}")
    return 0


# --------------------------------------------------------------------- train


def _assemble_train_config(args):
    doc = _load_yaml(args.config) if args.config else {}
    data_doc = dict(doc.pop("data", {}) or {})
    pred_doc = doc.pop("predictor", None)

    data = DataConfig(**data_doc)
    if args.dataset:
        data.name = args.dataset
    if args.root:
        data.root = args.root
    if args.resolution:
        data.resolution = args.resolution
    if args.channels:
        data.channels = args.channels
    if data.name.startswith("cifar"):
        data.resolution = 32
        data.channels = 3

    if pred_doc is not None:
        predictor = PredictorConfig(**dict(pred_doc))
    else:
        predictor = PredictorConfig(
            model_channels=16,
            channel_multipliers=(1, 2),
            res_blocks=1,
            in_channels=data.channels,
            out_channels=data.channels,
            base_resolution=data.resolution,
        )
    if args.cm:
        predictor.model_channels = args.cm
        predictor.time_embed_dim = 4 * args.cm
    if args.u:
        predictor.channel_multipliers = args.u
        predictor.attention_levels = (len(args.u) - 1,)
    if args.nr:
        predictor.res_blocks = args.nr

    config = TrainConfig(data=data, predictor=predictor, **doc)
    for flag, attr in [
        ("steps", "train_steps"),
        ("batch_size", "batch_size"),
        ("lr", "learning_rate"),
        ("alpha", "alpha"),
        ("alpha_schedule", "alpha_schedule"),
        ("seed", "seed"),
        ("ema", "ema_decay"),
    ]:
        value = getattr(args, flag)
        if value is not None:
            setattr(config, attr, value)
    config.out_dir = args.out or os.path.join(_out_root(), "train")
    return config


def _cmd_train(args):
    config = _assemble_train_config(args)
    ckpt = train(config, resume_from=args.resume)
    last = ckpt.history[-1] if ckpt.history else {}
    print(
        f"trained {config.train_steps} steps; final loss {last.get('loss', float('nan')):.4f}; "
        f"checkpoint in {config.out_dir}"
    )
    return 0


# ---------------------------------------------------------------------- eval


def _split_arrays(dataset, split, limit):
    xs = dataset.test_x if split == "test" else dataset.train_x
    ys = dataset.test_y if split == "test" else dataset.train_y
    if limit:
        xs, ys = xs[:limit], ys[:limit]
    if len(xs) == 0:
        raise ValueError(f"no samples in split {split!r}")
    return xs, ys


def _cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    bundle = bundle_from_checkpoint(ckpt, use_ema=args.ema)
    dataset = load_dataset(ckpt.config.data)
    xs, ys = _split_arrays(dataset, args.split, args.limit)
    rng = torch.Generator().manual_seed(args.seed)

    records = []
    correct = 0
    labels_flat = bundle.codebook.labels.reshape(bundle.codebook.num_classes, -1)
    for i in range(0, len(xs), args.batch_size):
        xb = torch.as_tensor(xs[i : i + args.batch_size])
        with torch.no_grad():
            y0_hat = sample_label(bundle.schedule, bundle.predictor, xb, rng)
        d = np.abs(
            y0_hat.cpu().numpy().reshape(len(xb), 1, -1) - labels_flat[None]
        ).sum(axis=2)
        preds = d.argmin(axis=1)
        for k in range(len(xb)):
            agreement = 1.0
            pred = int(preds[k])
            if args.votes > 1:
                pred, votes = classify_votes(bundle, xb[k], args.votes, rng)
                agreement = float(votes.max() / args.votes)
            ok = pred == int(ys[i + k])
            correct += ok
            records.append(
                {
                    "index": i + k,
                    "true_class": int(ys[i + k]),
                    "pred": pred,
                    "agreement": agreement,
                    "distances": [round(float(v), 4) for v in d[k]],
                }
            )
    acc = correct / len(xs)

    out = args.out or os.path.join(_out_root(), "eval")
    os.makedirs(out, exist_ok=True)
    _write_json(
        os.path.join(out, "report.json"),
        {
            "clean_accuracy": acc,
            "n_samples": len(xs),
            "split": args.split,
            "votes": args.votes,
            "checkpoint": args.checkpoint,
            "dataset": asdict(ckpt.config.data),
            "seeds": {"eval_seed": args.seed},
            "code_version": __version__,
        },
    )
    write_records(os.path.join(out, "records.jsonl"), records)
    print(f"clean accuracy {acc:.4f} on {len(xs)} {args.split} samples; records in {out}")
    return 0


# -------------------------------------------------------------------- attack


def _cmd_attack(args):
    ckpt = load_checkpoint(args.checkpoint)
    bundle = bundle_from_checkpoint(ckpt, use_ema=args.ema)
    dataset = load_dataset(ckpt.config.data)
    xs, ys = _split_arrays(dataset, args.split, args.limit)

    doc = _load_yaml(args.config) if args.config else {}
    cfg = AttackConfig(**doc)
    if args.family:
        cfg.family = args.family
    if args.epsilon is not None:
        cfg.epsilon = args.epsilon
    if args.steps is not None:
        cfg.steps = args.steps
    if args.step_size is not None:
        cfg.step_size = args.step_size
    if args.eot is not None:
        cfg.eot_samples = args.eot
    if args.seed is not None:
        cfg.seed = args.seed

    rng = torch.Generator().manual_seed(cfg.seed)
    report = evaluate_robustness(bundle, (xs, ys), cfg, rng, batch_size=args.batch_size)

    out = args.out or os.path.join(_out_root(), "attack")
    os.makedirs(out, exist_ok=True)
    summary = report.as_dict()
    records = summary.pop("records")
    summary["split"] = args.split
    summary["checkpoint"] = args.checkpoint
    summary["code_version"] = __version__
    _write_json(os.path.join(out, "report.json"), summary)
    write_records(os.path.join(out, "records.jsonl"), records)
    print(
        f"{cfg.family}: clean {report.clean_accuracy:.4f}, robust {report.robust_accuracy:.4f} "
        f"on {report.n_samples} samples; report in {out}"
    )
    return 0


# --------------------------------------------------------------- param-count


def _cmd_param_count(args):
    config = PredictorConfig(
        model_channels=args.cm,
        channel_multipliers=args.u,
        res_blocks=args.nr,
        in_channels=args.channels,
        out_channels=args.channels,
        base_resolution=args.res,
    )
    n = param_count(config)
    print(f"{n} trainable parameters ({n / 1e6:.2f}M)")
    return 0


# -------------------------------------------------------------------- report


def _cmd_report(args):
    print(summarize_run(args.run))
    made = []
    if args.plots:
        metrics = read_metrics(args.run)
        if not metrics:
            raise ValueError(f"no metrics.jsonl in {args.run}")
        path = os.path.join(args.run, "curves.png")
        save_loss_curves(path, metrics)
        made.append(path)
    if args.grid:
        ckpt_path = args.checkpoint or os.path.join(args.run, "checkpoint.pt")
        ckpt = load_checkpoint(ckpt_path)
        bundle = bundle_from_checkpoint(ckpt)
        dataset = load_dataset(ckpt.config.data)
        n = min(args.samples, len(dataset.test_x))
        xs = torch.as_tensor(dataset.test_x[:n])
        ys = dataset.test_y[:n]
        rng = torch.Generator().manual_seed(args.seed)
        with torch.no_grad():
            y0_hat = sample_label(bundle.schedule, bundle.predictor, xs, rng)
        rows = [
            xs.cpu().numpy(),
            bundle.codebook.labels[ys],
            y0_hat.cpu().numpy(),
        ]
        path = os.path.join(args.run, "grid.png")
        save_image_grid(
            path, rows, ["input", "image label", "generated"], bundle.codebook.data_range
        )
        made.append(path)
    if made:
        print("wrote " + ", ".join(made))
    return 0


# ------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="labelbridge",
        description="Brownian-bridge diffusion classifier with orthogonal image labels",
    )
    parser.add_argument("--version", action="version", version=f"labelbridge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-labels", help="generate and export an orthogonal label codebook")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--shape", type=_parse_shape, default=(3, 32, 32), help="e.g. 3x32x32")
    p.add_argument("--range", type=_parse_pair, default=(-1.0, 1.0), help="lo,hi")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_labels)

    p = sub.add_parser("train", help="train a predictor on a dataset")
    p.add_argument("--config", help="YAML file mirroring the TrainConfig key tree")
    p.add_argument("--dataset", help="shapes-K, cifar10, or cifar100")
    p.add_argument("--root", help="directory with the standard pickle sets")
    p.add_argument("--resolution", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--cm", type=int, help="predictor base channels")
    p.add_argument("--u", type=_parse_ints, help="channel multipliers, e.g. 1,4")
    p.add_argument("--nr", type=int, help="res blocks per level")
    p.add_argument("--steps", type=int, dest="steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-schedule", choices=["constant", "linear"], dest="alpha_schedule")
    p.add_argument("--ema", type=float, help="EMA decay, e.g. 0.999")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="clean accuracy of a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=0, help="0 = whole split")
    p.add_argument("--votes", type=int, default=1, help="majority-vote draws per sample")
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ema", action="store_true", help="use EMA weights if present")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("attack", help="robust accuracy under a white-box attack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="YAML file mirroring the AttackConfig key tree")
    p.add_argument("--family", choices=list(FAMILIES))
    p.add_argument("--epsilon", type=_parse_fraction, help='e.g. "8/255"')
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=_parse_fraction, dest="step_size")
    p.add_argument("--eot", type=int)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--ema", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("param-count", help="parameter count for a predictor config")
    p.add_argument("--cm", type=int, required=True)
    p.add_argument("--u", type=_parse_ints, required=True, help="e.g. 1,4")
    p.add_argument("--nr", type=int, default=1)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.set_defaults(func=_cmd_param_count)

    p = sub.add_parser("report", help="summarize a run directory; optional plots and grid")
    p.add_argument("--run", required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--checkpoint", help="defaults to <run>/checkpoint.pt for --grid")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_report)

    return parser


def run_cli(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
