"""Command-line entry point: gen-data, train, eval, sweep, report.

Exit codes: 0 success, 1 usage error, 2 numerical abort, 3 I/O or format
error. A flat key=value config file (--config) supplies defaults; explicit
flags win on conflict. Every CSV opens with an ISO-8601 timestamp comment
unless --no-timestamp is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import (
    load_dataset,
    longtail_counts,
    save_dataset,
    split_classes,
    synth_gaussian,
)
from .exceptions import ConfigurationError, ElfError, FormatError, NumericalAbort
from .exits import ExitPolicy
from .losses import ClassWeights, DrwSchedule, effective_weights, ldam_margins
from .metrics import (
    accuracy_flop_curve,
    confidence_histogram,
    evaluate,
    exit_assignments,
    flops_of,
    flops_report,
    per_exit_loss_stats,
    split_accuracy,
    write_assignments_csv,
    write_curve_csv,
    write_histogram_csv,
    write_property1_csv,
    write_splits_csv,
)
from .model import build_network, load_checkpoint, save_checkpoint
from .train import TrainConfig, make_exit_loss, train

CE_SWEEP_GRID = tuple(0.5 + 0.05 * i for i in range(10))  # 0.5 .. 0.95
LDAM_SWEEP_NUMERATORS = (1.5, 1.55, 1.6, 1.65, 1.7, 1.75)  # divided by c


def _header_lines(args) -> tuple[str, ...]:
    if args.no_timestamp:
        return ()
    return (datetime.now(timezone.utc).isoformat(),)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ELF_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("ELF_THREADS must be an integer")


def _parse_decay(text: str) -> tuple[tuple[int, float], ...]:
    if not text:
        return ()
    out = []
    for item in text.split(","):
        epoch, factor = item.split(":")
        out.append((int(epoch), float(factor)))
    return tuple(out)


def _parse_grid(text: str) -> list[float]:
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigurationError("threshold grid is empty")
    return values


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _add_common(p):
    p.add_argument("--config", help="flat key=value config file; flags win on conflict")
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit the timestamp comment from output files (default: off)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--out", default=".", help="output directory (default .)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elfnet",
        description="Train and evaluate early-exit networks on long-tailed data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate long-tailed train + balanced eval files")
    _add_common(g)
    g.add_argument("--classes", type=int, default=10, help="number of classes (default 10)")
    g.add_argument("--ratio", type=float, default=100.0, help="imbalance ratio (default 100)")
    g.add_argument("--n", type=int, default=5000, help="head-class training examples (default 5000)")
    g.add_argument("--eval-n", type=int, default=100, help="balanced eval examples per class (default 100)")
    g.add_argument("--dims", default="1,9,9", help="input dims C,H,W (default 1,9,9)")
    g.add_argument("--sigma", type=float, default=2.0, help="per-element noise sigma (default 2.0)")

    t = sub.add_parser("train", help="train a multi-exit network")
    _add_common(t)
    t.add_argument("--data", required=True, help="training ELFD file")
    t.add_argument("--loss", choices=["ce", "focal", "ldam"], default="ce", help="exit loss (default ce)")
    t.add_argument("--exits", type=int, default=3, help="number of exits K (default 3)")
    t.add_argument("--widths", default="16,32,64", help="per-segment channel counts (default 16,32,64)")
    t.add_argument("--epochs", type=int, default=40, help="training epochs (default 40)")
    t.add_argument("--batch", type=int, default=64, help="batch size (default 64)")
    t.add_argument("--lr", type=float, default=0.1, help="initial learning rate (default 0.1)")
    t.add_argument("--decay", default="", help="lr decay steps epoch:factor[,..] (default none)")
    t.add_argument("--warmup", type=int, default=5, help="linear warmup epochs (default 5)")
    t.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    t.add_argument("--wd", type=float, default=2e-4, help="weight decay (default 2e-4)")
    t.add_argument("--beta", type=float, default=0.9999, help="effective-number beta (default 0.9999)")
    t.add_argument("--gamma", type=float, default=0.5, help="focal gamma (default 0.5)")
    t.add_argument("--max-margin", type=float, default=0.5, help="largest LDAM margin (default 0.5)")
    t.add_argument("--drw-epoch", type=int, default=None,
                   help="delayed-reweighting switch epoch (default: reweighting off)")
    t.add_argument("--train-threshold", type=float, default=None,
                   help="training exit threshold t (default 0.9 for ce/focal, 2/c for ldam)")
    t.add_argument("--infer-threshold", type=float, default=0.5,
                   help="inference exit threshold s (default 0.5)")
    t.add_argument("--plain", action="store_true",
                   help="train the final exit only, no early-exit loss (default: off)")

    e = sub.add_parser("eval", help="evaluate a checkpoint; emit metric CSVs and a JSON summary")
    _add_common(e)
    e.add_argument("--checkpoint", required=True, help="ELFC checkpoint")
    e.add_argument("--data", required=True, help="balanced eval ELFD file")
    e.add_argument("--train-data", default=None,
                   help="training ELFD file for Many/Medium/Few counts (default: use eval counts)")
    e.add_argument("--loss", choices=["ce", "focal", "ldam"], default="ce", help="exit loss (default ce)")
    e.add_argument("--beta", type=float, default=0.9999, help="effective-number beta (default 0.9999)")
    e.add_argument("--gamma", type=float, default=0.5, help="focal gamma (default 0.5)")
    e.add_argument("--max-margin", type=float, default=0.5, help="largest LDAM margin (default 0.5)")
    e.add_argument("--reweight", action="store_true",
                   help="use effective-number weights in the loss stats (default: uniform)")
    e.add_argument("--train-threshold", type=float, default=None,
                   help="training threshold t for exit grouping (default 0.9 / 2/c)")
    e.add_argument("--infer-threshold", type=float, default=0.5,
                   help="inference exit threshold s (default 0.5)")
    e.add_argument("--bins", type=int, default=10, help="confidence histogram bins (default 10)")

    s = sub.add_parser("sweep", help="accuracy-FLOP curve over inference thresholds")
    _add_common(s)
    s.add_argument("--checkpoint", required=True, help="ELFC checkpoint")
    s.add_argument("--data", required=True, help="eval ELFD file")
    s.add_argument("--loss", choices=["ce", "focal", "ldam"], default="ce",
                   help="loss type, sets the default grid (default ce)")
    s.add_argument("--s-grid", default=None,
                   help="comma-separated thresholds (default: 0.5..0.95 for ce/focal, {1.5..1.75}/c for ldam)")
    s.add_argument("--train-threshold", type=float, default=None,
                   help="training threshold recorded in the policy (default 0.9 / 2/c)")

    r = sub.add_parser("report", help="print a human-readable summary of eval/sweep outputs")
    _add_common(r)
    r.add_argument("--summary", default=None, help="summary.json from eval")
    r.add_argument("--curve", default=None, help="curve.csv from sweep")

    return parser


def _load_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config file {path}: {exc}")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _apply_config(parser, argv) -> argparse.Namespace:
    """Parse argv; config-file values become defaults so flags win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = _load_config_file(args.config)
    # find the subparser to learn the legal keys and their types
    sub_actions = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    subparser = sub_actions.choices[args.command]
    dests = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                dests[opt[2:]] = action
    defaults = {}
    for key, value in values.items():
        if key not in dests:
            raise ConfigurationError(f"unknown config key {key!r}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = value.lower() in ("1", "true", "yes")
        elif action.type is not None:
            defaults[action.dest] = action.type(value)
        else:
            defaults[action.dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def cmd_gen_data(args) -> int:
    dims = _parse_ints(args.dims)
    if len(dims) != 3:
        raise ConfigurationError(f"--dims must be C,H,W, got {args.dims!r}")
    counts = longtail_counts(args.n, args.classes, args.ratio)
    train_ds = synth_gaussian(args.classes, dims, counts, args.sigma, args.seed)
    eval_counts = np.full(args.classes, args.eval_n, dtype=np.int64)
    # same means as the training set, independent noise stream
    eval_ds = synth_gaussian(
        args.classes, dims, eval_counts, args.sigma, args.seed,
        sample_seed=args.seed + 1_000_003,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train.elfd")
    save_dataset(eval_ds, out / "eval.elfd")
    print(f"wrote {out/'train.elfd'} (imbalance {train_ds.imbalance_ratio():.6g}) "
          f"and {out/'eval.elfd'} ({eval_ds.total} examples)")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lr_decay=_parse_decay(args.decay),
        warmup_epochs=args.warmup,
        weight_decay=args.wd,
        momentum=args.momentum,
        seed=args.seed,
        loss=args.loss,
        beta=args.beta,
        gamma=args.gamma,
        max_margin=args.max_margin,
        drw_epoch=args.drw_epoch,
        train_threshold=args.train_threshold,
        infer_threshold=args.infer_threshold,
        elf=not args.plain,
    )
    net = build_network(
        dataset.num_classes,
        dataset.dims,
        args.exits,
        _parse_ints(args.widths),
        args.seed,
    )
    result = train(net, dataset, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out / "checkpoint.elfc")
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        for line in _header_lines(args):
            f.write(f"# {line}\n")
        cols = ["epoch", "lr"]
        cols += [f"mean_loss_exit_{k+1}" for k in range(net.num_exits)]
        cols += [f"exit_{k+1}" for k in range(net.num_exits)]
        cols.append("train_top1")
        f.write(",".join(cols) + "\n")
        for log in result.epochs:
            row = [str(log.epoch), format(log.lr, ".6g")]
            row += [format(v, ".6g") for v in log.mean_loss_per_exit]
            row += [str(int(v)) for v in log.exit_histogram]
            row.append(format(log.train_top1, ".6g"))
            f.write(",".join(row) + "\n")
    final = result.epochs[-1]
    print(f"trained {config.epochs} epochs; final train top1 {final.train_top1:.6g}%; "
          f"wrote {out/'checkpoint.elfc'} and {log_path}")
    return 0


def _eval_policy(args, net) -> ExitPolicy:
    t = args.train_threshold
    if t is None:
        t = 2.0 / net.num_classes if args.loss == "ldam" else 0.9
    return ExitPolicy.uniform(net.num_exits, t, args.infer_threshold)


def cmd_eval(args) -> int:
    _worker_count()
    net = load_checkpoint(args.checkpoint)
    eval_set = load_dataset(args.data)
    if eval_set.num_classes != net.num_classes:
        raise ConfigurationError(
            f"checkpoint expects {net.num_classes} classes, dataset has "
            f"{eval_set.num_classes}"
        )
    split_counts = (
        load_dataset(args.train_data).class_counts
        if args.train_data
        else eval_set.class_counts
    )
    policy = _eval_policy(args, net)
    preds, _, traces = evaluate(net, eval_set, policy)
    split = split_classes(split_counts)
    accuracies = split_accuracy(preds, eval_set.y, split)
    report = flops_report(flops_of(net), traces)

    weights = (
        effective_weights(split_counts, args.beta)
        if args.reweight
        else ClassWeights.uniform(net.num_classes)
    )
    margins = ldam_margins(split_counts, args.max_margin) if args.loss == "ldam" else None
    loss_config = TrainConfig(
        loss=args.loss, beta=args.beta, gamma=args.gamma, max_margin=args.max_margin
    )
    exit_loss = make_exit_loss(loss_config, weights, margins)
    stats, increasing = per_exit_loss_stats(net, eval_set, policy, exit_loss)
    subsets = {
        tag: split.classes(tag)
        for tag in ("Many", "Medium", "Few")
        if split.classes(tag)
    }
    histograms = confidence_histogram(net, eval_set, subsets, bins=args.bins)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header_lines(args)
    write_splits_csv(out / "splits.csv", split, accuracies, header)
    write_property1_csv(out / "property1.csv", stats, header)
    write_histogram_csv(out / "histogram.csv", histograms, header)
    write_assignments_csv(out / "assignments.csv", exit_assignments(traces, eval_set.y), header)
    summary = {
        "top1": {k: (None if v is None else round(v, 6)) for k, v in accuracies.items()},
        "mean_flops_per_example": round(report.mean_flops_per_example, 6),
        "relative_flops_percent": round(report.relative_to_baseline, 6),
        "per_exit_cumulative_flops": [int(v) for v in report.per_exit_cumulative_flops],
        "loss_strictly_increasing_by_exit": bool(increasing),
    }
    if not args.no_timestamp:
        summary["generated"] = datetime.now(timezone.utc).isoformat()
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    net = load_checkpoint(args.checkpoint)
    eval_set = load_dataset(args.data)
    if args.s_grid is not None:
        grid = _parse_grid(args.s_grid)
    elif args.loss == "ldam":
        grid = [v / net.num_classes for v in LDAM_SWEEP_NUMERATORS]
    else:
        grid = list(CE_SWEEP_GRID)
    t = args.train_threshold
    if t is None:
        t = 2.0 / net.num_classes if args.loss == "ldam" else 0.9
    points = accuracy_flop_curve(net, eval_set, grid, train_threshold=t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out / "curve.csv", points, net.num_exits, _header_lines(args))
    best = max(points, key=lambda p: (p.top1, -p.mean_flops))
    print(f"wrote {out/'curve.csv'}; best s={best.s:.6g} "
          f"(top1 {best.top1:.6g}%, mean flops {best.mean_flops:.6g})")
    return 0


def cmd_report(args) -> int:
    if not args.summary and not args.curve:
        raise ConfigurationError("report needs --summary and/or --curve")
    if args.summary:
        with open(args.summary) as f:
            summary = json.load(f)
        print("== evaluation summary ==")
        for tag in ("Many", "Medium", "Few", "All"):
            v = summary["top1"].get(tag)
            print(f"  {tag:<7} top1: {'absent' if v is None else f'{v:.6g}%'}")
        print(f"  mean FLOPs/example: {summary['mean_flops_per_example']:.6g}")
        print(f"  relative to baseline: {summary['relative_flops_percent']:+.6g}%")
        print(f"  loss increasing by exit: {summary['loss_strictly_increasing_by_exit']}")
    if args.curve:
        print("== accuracy-FLOP curve ==")
        with open(args.curve) as f:
            for line in f:
                if not line.startswith("#"):
                    print("  " + line.rstrip())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
