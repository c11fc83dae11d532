"""Command-line entry point.

Exit status: 0 on success, 1 if any run diverged (or a gradient check
failed), 2 on configuration or input errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .config import parse_config
from .data import read_dataset, write_dataset
from .errors import ConfigError, FormatError, SoftFTError
from .experiments import make_data, run_experiment
from .gradcheck import TOLERANCE, run_gradchecks
from .metrics import (
    Curve,
    cluster_purity,
    mean_average_precision,
    top1_accuracy,
    verification_report,
)
from .model import load_checkpoint
from .report import emit_svg_lineplot, read_csv
from .trainer import SOURCE, TARGET, extract_features, predict_logits

log = logging.getLogger("softft")

EVAL_METRICS = ("accuracy", "mAP", "tar", "purity")


def _load(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out_dir is not None:
        cfg = replace(cfg, out_dir=args.out_dir)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg)
    out = cfg.output_dir()
    print(f"wrote {out / 'records.csv'}, {out / 'metrics.csv'}, {out / 'aggregate.csv'}")
    for exp, arm, metric, level, med, n in report.aggregate_rows:
        tag = f"{metric}@{level}" if level else metric
        print(f"{arm:>16} {tag:<24} median={med:.4f} n={n}")
    for failure in report.failures:
        print(f"diverged: {failure}", file=sys.stderr)
    return 1 if report.failures else 0


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = cfg.output_dir() / "data"
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        data = make_data(cfg, seed)
        for name in ("source", "target", "target_full", "target_test", "target2"):
            ds = getattr(data, name)
            if ds is None:
                continue
            path = out / f"{name}_seed{seed}.sftd"
            write_dataset(ds, path)
            print(path)
    return 0


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    metrics = args.metric or ["accuracy"]
    head = args.head or (TARGET if TARGET in model.heads else SOURCE)
    print("metric,level,value")
    for metric in metrics:
        if metric in ("accuracy", "mAP"):
            if head not in model.heads:
                raise ConfigError(f"checkpoint has no head {head!r}; heads: {sorted(model.heads)}")
            logits = predict_logits(model, head, ds.data)
            if metric == "accuracy":
                print(f"accuracy,,{top1_accuracy(logits, ds.labels):.9g}")
            else:
                print(f"mAP,,{mean_average_precision(_softmax(logits), ds.labels)[0]:.9g}")
        elif metric == "tar":
            report = verification_report(extract_features(model, ds.data), ds.labels, tuple(args.far))
            for m, level, value in report.rows():
                print(f"{m},{level},{value:.9g}")
        else:
            feats = extract_features(model, ds.data)
            print(f"purity,,{cluster_purity(feats, ds.labels, ds.num_classes, seed=args.seed or 0):.9g}")
    return 0


def cmd_plot(args) -> int:
    rows = read_csv(args.csv)
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    if args.arm:
        arms = [a for a in arms if a in args.arm]
    curves = []
    for arm in arms:
        by_epoch: dict[int, list[float]] = {}
        for r in rows:
            if r["arm"] == arm:
                by_epoch.setdefault(int(r["epoch"]), []).append(float(r[args.column]))
        epochs = sorted(by_epoch)
        curves.append(Curve(arm, epochs, [float(np.median(by_epoch[e])) for e in epochs]))
    if not curves:
        raise ConfigError(f"{args.csv}: no rows to plot")
    for warning in emit_svg_lineplot(curves, args.out, x_label="epoch", y_label=f"median {args.column}", title=args.title or ""):
        print(f"warning: {warning}", file=sys.stderr)
    print(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seed=args.seed or 0, points=args.points)
    ok = True
    for name, errors in results.items():
        worst = max(errors)
        passed = worst < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<24} max rel err {worst:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed list with a single seed")
    common.add_argument("--out-dir", default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="softft", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run an experiment recipe")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", parents=[common], help="write the datasets of a recipe")
    g.add_argument("config")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset file")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--metric", action="append", choices=EVAL_METRICS)
    e.add_argument("--head", default=None)
    e.add_argument("--far", type=float, action="append", default=None)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", parents=[common], help="plot median curves from a records CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", required=True)
    pl.add_argument("--column", default="test_acc", choices=("alpha", "loss_src", "loss_tar", "train_acc", "test_acc"))
    pl.add_argument("--arm", action="append")
    pl.add_argument("--title", default=None)
    pl.set_defaults(func=cmd_plot)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operation")
    gc.add_argument("--points", type=int, default=3)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "far", None) is None and args.command == "eval":
        args.far = [0.1, 0.01]
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, SoftFTError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
