"""Command-line entry points.

Exit codes are shared by every subcommand: 0 success, 1 runtime or data
failure, 2 configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import gradsuite
from .autodiff import ShapeError
from .config import ConfigError, ExperimentConfig, load_config
from .inference import labels_from_probs, sliding_window_predict
from .metrics import aggregate_stats, emit_report, subject_metrics
from .synthetic import PhantomSpec, generate_dataset
from .training import CheckpointError, ShapeMismatchError, load_checkpoint, train
from .volume_io import VolumeFormatError, load_record, normalize_intensity, read_manifest, read_volume, write_volume

log = logging.getLogger("voxkit")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

ARCHS = ("unet", "fcn")
LOSS_KINDS = ("ce", "balanced_ce", "dice")
SAMPLER_MODES = ("uniform", "class_balanced")


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- train

def _check_paths(cfg: ExperimentConfig) -> None:
    train_path = cfg.resolve(cfg.data.train_manifest)
    if train_path is None:
        raise ConfigError("data.train_manifest is required")
    for field_name in ("train_manifest", "val_manifest"):
        p = cfg.resolve(getattr(cfg.data, field_name))
        if p is not None and not p.is_file():
            raise ConfigError(f"data.{field_name}: file not found: {p}")


def run_experiment(cfg: ExperimentConfig, out_dir) -> float | None:
    _check_paths(cfg)
    ckpt, _ = train(cfg.model, cfg.loss, cfg.sampler, cfg.train,
                    cfg.resolve(cfg.data.train_manifest), cfg.resolve(cfg.data.val_manifest),
                    out_dir, normalization=cfg.data.normalization, stride=cfg.infer.stride)
    return ckpt.best_val_dsc


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    best = run_experiment(cfg, args.out)
    print(f"training finished; best validation mean DSC: {best if best is not None else 'n/a'}")
    return EXIT_OK


# ---------------------------------------------------------------- predict

def cmd_predict(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise CommandError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    volume = read_volume(args.input)
    if volume.channels != 1:
        raise CommandError(f"{args.input}: model expects 1 image channel, got {volume.channels}", EXIT_CONFIG)
    patch = int(ckpt.extra.get("sampler", {}).get("patch_size", 64))
    if args.stride is not None and not 1 <= args.stride <= patch:
        raise CommandError(f"--stride must lie in [1, {patch}]", EXIT_CONFIG)
    norm = ckpt.extra.get("normalization", {"method": "zscore", "clip": None})
    image = normalize_intensity(volume, norm.get("method", "zscore"), norm.get("clip"))
    probs = sliding_window_predict(image, ckpt.params, ckpt.model_config, patch, args.stride)
    out = probs if args.probs else labels_from_probs(probs)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_volume(args.output, out)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    records = read_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    missing = [r.id for r in records if not (pred_dir / f"{r.id}.mvol").is_file()]
    if missing:
        raise CommandError(f"missing predictions for: {', '.join(missing)}")
    pairs = []
    for r in records:
        _, truth = load_record(r)
        if truth is None:
            raise CommandError(f"subject {r.id} has no label in {args.manifest}")
        pred = read_volume(pred_dir / f"{r.id}.mvol")
        if pred.values.shape != truth.values.shape:
            raise CommandError(f"subject {r.id}: prediction dims {pred.values.shape} != truth dims {truth.values.shape}")
        pairs.append((r.id, pred.values, truth.values))
    num_classes = 1 + max(int(max(p.max(), t.max())) for _, p, t in pairs)
    subjects = [subject_metrics(sid, p, t, num_classes) for sid, p, t in pairs]
    emit_report(aggregate_stats(subjects), subjects, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- grid

def arm_name(arch: str, loss: str, mode: str) -> str:
    return f"{arch}_{loss}_{mode}"


def grid_arms(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """All arch x loss x sampler combinations; everything else (seeds included) is shared."""
    arms = []
    for arch in ARCHS:
        for loss in LOSS_KINDS:
            for mode in SAMPLER_MODES:
                c = replace(cfg, model=replace(cfg.model, arch=arch), loss=replace(cfg.loss, kind=loss),
                            sampler=replace(cfg.sampler, mode=mode))
                arms.append((arm_name(arch, loss, mode), c))
    return arms


def _run_arm(name: str, cfg: ExperimentConfig, out_dir: str):
    try:
        return name, run_experiment(cfg, out_dir), None
    except Exception as e:  # recorded per arm, the grid keeps going
        return name, None, f"{type(e).__name__}: {e}"


def cmd_grid(args) -> int:
    cfg = load_config(args.config, args.set)
    _check_paths(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arms = grid_arms(cfg)
    jobs = [(name, c, str(out / name)) for name, c in arms]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_arm, *zip(*jobs)))
    else:
        results = []
        for job in jobs:
            log.info("grid arm %s", job[0])
            results.append(_run_arm(*job))
    with open(out / "grid_comparison.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["arm", "best_val_mean_dsc", "status"])
        for name, dsc, err in results:
            w.writerow([name, "" if dsc is None else f"{dsc:.6f}", "ok" if err is None else f"failed: {err}"])
    failed = [(name, err) for name, _, err in results if err is not None]
    for name, err in failed:
        print(f"arm {name} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------- gradcheck / phantom

def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(args.seed)
    print(gradsuite.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_phantom(args) -> int:
    try:
        # object radii scale with the cube so small corpora stay placeable
        lo, hi = PhantomSpec.radius_range
        radii = (max(1, round(lo * args.size / 64)), max(1, round(hi * args.size / 64)))
        spec = PhantomSpec(dims=(args.size,) * 3, seed=args.seed, radius_range=radii)
    except ValueError as e:
        raise CommandError(str(e), EXIT_CONFIG) from e
    train_csv, val_csv = generate_dataset(spec, args.n_train, args.n_val, args.out)
    print(f"wrote {train_csv} and {val_csv}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxkit", description="3D segmentation experiments on volumetric images.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override a config field (repeatable)")

    sp = sub.add_parser("train", help="train one model")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="segment one volume with a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--stride", type=int, default=None, help="tile stride (default: patch size / 2)")
    sp.add_argument("--probs", action="store_true", help="write class probabilities instead of labels")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against a labelled manifest")
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grid", help="train every arch x loss x sampler combination")
    with_config(sp)
    sp.add_argument("--jobs", type=int, default=1, help="arms run concurrently")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("phantom", help="write a synthetic labelled dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=4)
    sp.add_argument("--n-val", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=64, help="cube edge length in voxels")
    sp.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeMismatchError, ShapeError) as e:
        print(f"shape/config mismatch: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, VolumeFormatError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
