"""Command-line entry point: ingest, make-pairs, train, eval, ablate, sweep-alpha.

Exit codes: 0 success, 1 runtime failure (including divergence aborts),
2 usage or configuration errors. Every artifact-producing command writes its
fully-resolved configuration beside its outputs so a run directory is
self-describing.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfg_mod
from . import data as data_mod
from .train import accuracy_at, ablate as run_ablation, evaluate, pair_distances, sweep_alpha, train as run_training
from .arch import arch_from_config
from .config import hyperparams_from_config, load_run_config, resolve_data_path, write_resolved_config
from .errors import ConfigError, SevenError
from .model import SevenModel, load_checkpoint, save_checkpoint
from .optim import RmsProp

log = logging.getLogger(__name__)


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"size must look like 28x28, got {text!r}") from exc


def _parse_range(text):
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise ConfigError(f"range must look like 0:1, got {text!r}") from exc


def _parse_grid(text):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ConfigError(f"grid must look like lo:hi:count, got {text!r}") from exc
    if n < 1:
        raise ConfigError(f"grid needs >= 1 points, got {n}")
    return np.linspace(lo, hi, n)


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _require_file(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    if os.path.isdir(path):
        raise ConfigError(f"{what} is a directory, expected a file: {path}")
    return path


def _archive_path(path, what="sample archive"):
    # ingest writes a directory (samples.bin + ingest_summary.json); accept
    # either that directory or the samples.bin file itself
    path = resolve_data_path(path)
    if os.path.isdir(path):
        inner = os.path.join(path, "samples.bin")
        if os.path.exists(inner):
            return inner
        raise ConfigError(f"{what} directory has no samples.bin: {path}")
    return _require_file(path, what)


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(header, rows, path):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _load_config(args):
    cfg = load_run_config(_require_file(resolve_data_path(args.config), "config file"))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    return cfg


def _load_train_data(cfg):
    for key in ("samples", "pairs"):
        if not cfg.get(key):
            raise ConfigError(f"config is missing {key!r}")
    samples = data_mod.load_samples(_archive_path(cfg["samples"]))
    manifest = data_mod.load_manifest(
        _require_file(resolve_data_path(cfg["pairs"]), "pair manifest"))
    return samples, manifest


def _load_test_data(cfg):
    for key in ("samples_test", "pairs_test"):
        if not cfg.get(key):
            raise ConfigError(f"config is missing {key!r}")
    samples = data_mod.load_samples(
        _archive_path(cfg["samples_test"], "test sample archive"))
    manifest = data_mod.load_manifest(
        _require_file(resolve_data_path(cfg["pairs_test"]), "test pair manifest"))
    return samples, manifest


def _out_dir(cfg):
    out = cfg.get("out_dir")
    if not out:
        raise ConfigError("an output directory is required (config out_dir or --out)")
    os.makedirs(out, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_ingest(args):
    if args.format == "idx":
        if not (args.images and args.labels):
            raise ConfigError("--format idx requires --images and --labels")
        samples = data_mod.ingest_idx(
            _require_file(resolve_data_path(args.images), "image file"),
            _require_file(resolve_data_path(args.labels), "label file"),
            split_tag=args.split)
    else:
        if not (args.root and args.size):
            raise ConfigError("--format dir requires --root and --size")
        samples = data_mod.ingest_image_dir(
            resolve_data_path(args.root), _parse_size(args.size), split_tag=args.split)
    noise = None
    if args.noise:
        lo, hi = _parse_range(args.noise)
        samples = data_mod.add_uniform_noise(samples, lo, hi, args.seed)
        noise = [lo, hi]
    os.makedirs(args.out, exist_ok=True)
    archive = os.path.join(args.out, "samples.bin")
    data_mod.save_samples(samples, archive)
    summary = {
        "samples": len(samples),
        "split": samples.split_tag,
        "image_shape": list(samples.images.shape[1:]),
        "classes": samples.class_counts(),
        "skipped": getattr(samples, "skipped", 0),
        "noise": noise,
        "seed": args.seed,
    }
    _write_json(summary, os.path.join(args.out, "ingest_summary.json"))
    print(f"ingested {len(samples)} samples ({samples.split_tag}) -> {archive}")
    return 0


def cmd_make_pairs(args):
    samples = data_mod.load_samples(_archive_path(args.samples))
    disjoint_from = None
    if args.disjoint_from:
        disjoint_from = data_mod.load_samples(_archive_path(args.disjoint_from))
    manifest = data_mod.make_pairs(samples, args.seed, disjoint_from=disjoint_from)
    if args.label_budget is not None:
        manifest = data_mod.split_label_budget(manifest, args.label_budget, args.seed,
                                               strict_uniform=args.strict_uniform)
    data_mod.save_manifest(manifest, args.out)
    counts = manifest.counts()
    print(f"wrote {len(manifest)} pairs (pos={counts['pos']}, neg={counts['neg']}, "
          f"unl={counts['unl']}) -> {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    hp = hyperparams_from_config(cfg)
    if hp.variant == "disseven" and cfg["alpha"] != 0:
        log.info("variant disseven: configured alpha %s is overridden to 0", cfg["alpha"])
    samples, manifest = _load_train_data(cfg)
    out = _out_dir(cfg)
    write_resolved_config(cfg, os.path.join(out, "config.json"))
    model = SevenModel(arch_from_config(hp, cfg.get("arch")), hp)
    optimizer = RmsProp(lr=hp.lr)
    model, trace = run_training(model, manifest, samples, out_dir=out,
                                   checkpoint_interval=cfg["checkpoint_interval"],
                                   optimizer=optimizer)
    trace.to_csv(os.path.join(out, "trace.csv"))
    save_checkpoint(model, os.path.join(out, "final.ckpt"), optimizer_state=optimizer.state())
    summary = trace.summary()
    if cfg.get("samples_test") and cfg.get("pairs_test"):
        test_samples, test_manifest = _load_test_data(cfg)
        report = evaluate(model, test_manifest, test_samples, tau=hp.tau)
        summary["test"] = report.as_dict()
        print(f"test accuracy {report.accuracy:.4f} at tau {report.tau}")
    _write_json(summary, os.path.join(out, "summary.json"))
    print(f"trained {len(trace)} epochs -> {out}")
    return 0


def cmd_eval(args):
    ckpt_path = _require_file(resolve_data_path(args.checkpoint), "checkpoint")
    model, _ = load_checkpoint(ckpt_path)
    if args.preset and args.preset.lower() != model.hp.preset:
        raise ConfigError(
            f"checkpoint was trained with preset {model.hp.preset!r}, not {args.preset!r}")
    samples = data_mod.load_samples(_archive_path(args.samples))
    manifest = data_mod.load_manifest(
        _require_file(resolve_data_path(args.pairs), "pair manifest"))
    report = evaluate(model, manifest, samples, tau=args.tau)
    out = args.out or os.path.dirname(os.path.abspath(ckpt_path))
    os.makedirs(out, exist_ok=True)
    if args.tau_sweep:
        grid = _parse_grid(args.tau_sweep)
        d = pair_distances(model, manifest, samples)
        report.curve = [(float(t), accuracy_at(d, manifest.rel, t)) for t in grid]
        _write_csv(("tau", "accuracy"), report.curve, os.path.join(out, "tau_curve.csv"))
    _write_json(report.as_dict(), os.path.join(out, "report.json"))
    _write_json({"checkpoint": ckpt_path, "pairs": args.pairs, "samples": args.samples,
                 "tau": report.tau, "tau_sweep": args.tau_sweep},
                os.path.join(out, "eval_config.json"))
    print(f"accuracy {report.accuracy:.4f} on {report.total} pairs at tau {report.tau}")
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    hp = hyperparams_from_config(cfg)
    variants = [v.strip().lower() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants must list at least one variant")
    samples, manifest = _load_train_data(cfg)
    test_samples, test_manifest = _load_test_data(cfg)
    out = _out_dir(cfg)
    write_resolved_config(cfg, os.path.join(out, "config.json"))
    rows = run_ablation(hp, variants, manifest, samples, test_manifest, test_samples,
                            arch_cfg=cfg.get("arch"))
    _write_csv(("variant", "accuracy"), rows, os.path.join(out, "ablation.csv"))
    for variant, acc in rows:
        print(f"{variant}: {acc:.4f}")
    return 0


def cmd_sweep_alpha(args):
    cfg = _load_config(args)
    hp = hyperparams_from_config(cfg)
    alphas = _parse_floats(args.alphas)
    if not alphas:
        raise ConfigError("--alphas must list at least one value")
    samples, manifest = _load_train_data(cfg)
    test_samples, test_manifest = _load_test_data(cfg)
    out = _out_dir(cfg)
    write_resolved_config(cfg, os.path.join(out, "config.json"))
    rows = sweep_alpha(hp, alphas, manifest, samples, test_manifest, test_samples,
                                 arch_cfg=cfg.get("arch"), processes=max(1, args.threads))
    _write_csv(("alpha", "accuracy", "labeled_pairs"), rows,
               os.path.join(out, "alpha_sweep.csv"))
    for alpha, acc, labeled in rows:
        print(f"alpha={alpha}: {acc:.4f} (L={labeled})")
    return 0


# ------------------------------------------------------------------ wiring


def build_parser():
    parser = argparse.ArgumentParser(
        prog="seven",
        description="Semi-supervised twin-network verification: train encoders whose "
                    "embedding distance decides whether two samples share a class.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert raw data into a sample archive")
    p.add_argument("--format", choices=("idx", "dir"), required=True)
    p.add_argument("--images", help="IDX image file (--format idx)")
    p.add_argument("--labels", help="IDX label file (--format idx)")
    p.add_argument("--root", help="class-per-subdirectory image tree (--format dir)")
    p.add_argument("--size", help="target HxW for --format dir, e.g. 64x48")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--noise", help="per-pixel uniform noise range lo:hi, e.g. 0:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-pairs", help="build a pair manifest from a sample archive")
    p.add_argument("--samples", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-budget", type=int, default=None,
                   help="keep relations on this many pairs; the rest become unlabeled")
    p.add_argument("--strict-uniform", action="store_true",
                   help="draw the labeled subset uniformly instead of pos/neg-balanced")
    p.add_argument("--disjoint-from", default=None,
                   help="sample archive whose classes must not overlap this one")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on labeled pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--tau-sweep", default=None, help="accuracy curve grid lo:hi:count")
    p.add_argument("--preset", default=None, help="reject the checkpoint unless it matches")
    p.add_argument("--out", default=None, help="output directory (default: beside checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score several variants with shared splits")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True,
                   help="comma-separated subset of: seven,disseven,genseven,seven_mlp")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-alpha", help="train once per alpha and emit the accuracy curve")
    p.add_argument("--config", required=True)
    p.add_argument("--alphas", required=True, help="comma-separated alpha values")
    p.add_argument("--threads", type=int, default=1,
                   help="worker processes for independent sweep points")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_alpha)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SevenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        # filesystem problems the path checks could not anticipate
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
