"""Command-line entry points: train-teacher, distill, ablate, diagnose."""

import argparse
import os
import sys

from . import plots, train
from .config import load_config
from .train import SelfAuditError


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--variant", choices=("scratch", "full_kd", "primary_only",
                                         "primary_binary", "primary_secondary_binary"))
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering next to the CSV/JSONL output")


def _resolve(args):
    return load_config(args.config, {
        "seed": args.seed,
        "epochs": args.epochs,
        "kd.tau": args.tau,
        "kd.lambda1": args.lambda1,
        "kd.lambda2": args.lambda2,
        "variant": args.variant,
    })


def build_parser():
    parser = argparse.ArgumentParser(
        prog="groupkd",
        description="Teacher-student distillation with grouped-logit losses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train and freeze the wide network")
    _add_common(p)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")

    p = sub.add_parser("ablate", help="sweep tau, lambda1, lambda2, or variant")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--sweep", required=True, choices=train.SWEEPS)
    p.add_argument("--values", required=True,
                   help="comma-separated sweep values (lambda1 accepts teacher_mass)")

    p = sub.add_parser("diagnose", help="dump ranked prediction distributions")
    _add_common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--samples", default="0,1,2",
                   help="comma-separated training sample ids")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = _resolve(args)
    try:
        if args.command == "train-teacher":
            ckpt, metrics_path, records = train.train_teacher(cfg, args.out)
            if not args.no_figures:
                plots.plot_training_curves(
                    records, os.path.join(args.out, "teacher_curves.png"))
            print(ckpt)
            print(metrics_path)
        elif args.command == "distill":
            metrics_path, records = train.distill(cfg, args.teacher, args.out)
            if not args.no_figures:
                plots.plot_training_curves(
                    records, os.path.join(args.out, "curves.png"))
            print(metrics_path)
        elif args.command == "ablate":
            values = args.values.split(",")
            csv_path, rows = train.ablate(cfg, args.sweep, values,
                                          args.teacher, args.out)
            if not args.no_figures:
                plots.plot_sweep(rows, os.path.join(args.out,
                                                    f"sweep_{args.sweep}.png"))
            print(csv_path)
        elif args.command == "diagnose":
            sample_ids = [int(s) for s in args.samples.split(",")]
            tau = args.tau if args.tau is not None else cfg.kd.tau
            csv_path, summary_path, rows, summary = train.diagnose(
                args.teacher, args.student, cfg, sample_ids, tau, args.out)
            if not args.no_figures:
                plots.plot_rank_distribution(
                    rows, summary, os.path.join(args.out, "diagnose.png"))
            print(csv_path)
            print(summary_path)
    except SelfAuditError as exc:
        print(f"self-audit failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
