"""Command-line interface: synth | train | eval | gradcheck.

Exit codes: 0 success, 1 failed check or aborted training, 2 usage or
I/O problems.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import LOSS_KINDS, apply_overrides, parse_config_file
from .checkpoint import load_checkpoint
from .data import SynthSpec, load_arrays, load_manifest, synth_generate
from .errors import (CheckpointError, ConfigError, DomainError, IngestError,
                     TrainingError)
from .evaluate import evaluate_model, report_lines, write_report
from .gradcheck import COMPONENT_NAMES, run_suite
from .tensor import default_dtype
from .train import train_run


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _size(raw: str) -> tuple[int, int]:
    try:
        h_str, w_str = raw.lower().split("x")
        h, w = int(h_str), int(w_str)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected HxW (e.g. 128x88), got {raw!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("image extents must be positive")
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitage",
        description="Ordinal age regression over silhouette images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--n", type=_positive_int, required=True,
                         help="number of samples")
    p_synth.add_argument("--size", type=_size, default=(32, 22),
                         help="image size as HxW (default 32x22)")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", default="synth_dataset",
                         help="output directory")
    p_synth.add_argument("--age-min", type=int, default=2)
    p_synth.add_argument("--age-max", type=int, default=90)
    p_synth.add_argument("--noise", type=float, default=0.1)
    p_synth.add_argument("--gender-effect", action="store_true",
                         help="let the gender latent shape the silhouette")

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="key = value config file")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None, help="override train.out_dir")
    p_train.add_argument("--loss", choices=LOSS_KINDS, default=None)
    p_train.add_argument("--lambda", dest="lam", type=float, default=None,
                         help="weight of the distribution term")
    p_train.add_argument("--gender", dest="gender_weight", type=float,
                         default=None, help="weight of the gender loss")
    p_train.add_argument("--lr-decay", action="store_true",
                         help="enable the step learning-rate schedule")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("manifest")
    p_eval.add_argument("--out", default=None,
                        help="report directory (default: beside the checkpoint)")
    p_eval.add_argument("--cs-max", type=int, default=15)

    p_gc = sub.add_parser("gradcheck",
                          help="compare analytic gradients with finite differences")
    p_gc.add_argument("--component", choices=COMPONENT_NAMES, action="append",
                      default=None, help="check only this component (repeatable)")
    p_gc.add_argument("--threshold", type=float, default=None,
                      help="override every component's pass threshold")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--samples", type=_positive_int, default=40,
                      help="finite-difference probes per model tensor")
    return parser


def cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed, n_samples=args.n, height=args.size[0],
                     width=args.size[1], age_min=args.age_min,
                     age_max=args.age_max, noise=args.noise,
                     gender_effect=args.gender_effect)
    manifest = synth_generate(spec, args.out)
    print(os.path.join(args.out, "manifest.csv"))
    print(f"{len(manifest)} samples, ages {manifest.age_min:.0f}..{manifest.age_max:.0f}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out_dir=args.out,
                          loss=args.loss, lam=args.lam,
                          gender_weight=args.gender_weight,
                          lr_decay=args.lr_decay)
    result = train_run(cfg, quiet=args.quiet)
    print(f"best val MAE {result.best_val_mae:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    with default_dtype(np.float64 if ckpt.precision == "float64" else np.float32):
        manifest = load_manifest(args.manifest)
        images, ages, genders = load_arrays(manifest)
        report = evaluate_model(ckpt.model, images, ages, ckpt.rank,
                                genders=genders, cs_max=args.cs_max)
    for line in report_lines(report):
        print(line)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    paths = write_report(report, out_dir)
    print(f"report: {paths['txt']}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(components=args.component, threshold=args.threshold,
                        seed=args.seed, samples=args.samples)
    width = max(len(r.name) for r in results)
    all_ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  worst {r.worst_rel_err:.3e}  "
              f"threshold {r.threshold:.1e}  {r.seconds:6.2f}s  {status}")
        all_ok &= r.passed
    print("gradcheck: " + ("all components ok" if all_ok else "FAILED"))
    return 0 if all_ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train,
                "eval": cmd_eval, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigError, DomainError, IngestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
