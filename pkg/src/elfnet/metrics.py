"""Evaluation metrics: FLOP accounting, accuracy-FLOP curves, split accuracy,
per-exit loss statistics, and confidence histograms.

FLOP convention: one multiply-accumulate counts as 2 FLOPs; bias adds,
activations, pooling, and softmax count as 0. The relative-FLOPs baseline
is the same network with every example routed to the last exit and no
auxiliary heads evaluated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import LongTailedDataset, SplitAssignment
from .exits import ExitPolicy, elf_loss, predict
from .layers import softmax
from .model import FlopsTable, MultiExitNetwork


@dataclass(frozen=True)
class FlopsReport:
    per_exit_cumulative_flops: np.ndarray
    mean_flops_per_example: float
    relative_to_baseline: float  # signed percent vs. the no-early-exit cost


@dataclass(frozen=True)
class CurvePoint:
    s: float
    top1: float
    mean_flops: float
    exit_histogram: np.ndarray


def flops_of(net: MultiExitNetwork) -> FlopsTable:
    """Per-segment, per-head, and cumulative per-exit FLOP costs."""
    return net.flops_table()


def flops_report(table: FlopsTable, traces) -> FlopsReport:
    mean = float(np.mean([tr.flops for tr in traces]))
    baseline = table.baseline_flops
    return FlopsReport(
        per_exit_cumulative_flops=table.cumulative_exit_flops,
        mean_flops_per_example=mean,
        relative_to_baseline=100.0 * (mean / baseline - 1.0),
    )


def evaluate(net: MultiExitNetwork, dataset: LongTailedDataset, policy: ExitPolicy):
    """Predictions, probabilities, and exit traces over a whole dataset."""
    return predict(dataset.x.astype(np.float64), net, policy)


def accuracy_flop_curve(
    net: MultiExitNetwork,
    eval_set: LongTailedDataset,
    s_grid,
    train_threshold: float = 0.9,
) -> list[CurvePoint]:
    """One operating point per inference threshold, from a single model."""
    points = []
    for s in s_grid:
        policy = ExitPolicy.uniform(net.num_exits, train_threshold, s)
        preds, _, traces = evaluate(net, eval_set, policy)
        hist = np.bincount(
            [tr.exit_index - 1 for tr in traces], minlength=net.num_exits
        )
        points.append(
            CurvePoint(
                s=float(s),
                top1=100.0 * float(np.mean(preds == eval_set.y)),
                mean_flops=float(np.mean([tr.flops for tr in traces])),
                exit_histogram=hist,
            )
        )
    return points


def split_accuracy(predictions: np.ndarray, labels: np.ndarray, split: SplitAssignment):
    """Top-1 percentage per Many/Medium/Few split plus overall; empty splits
    report None rather than zero."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = {}
    for tag in ("Many", "Medium", "Few"):
        classes = split.classes(tag)
        member = np.isin(labels, classes)
        if not member.any():
            out[tag] = None
        else:
            out[tag] = 100.0 * float(np.mean(predictions[member] == labels[member]))
    out["All"] = 100.0 * float(np.mean(predictions == labels))
    return out


@dataclass(frozen=True)
class ExitGroupStats:
    exit_index: int
    count: int
    mean_loss: float


def per_exit_loss_stats(
    net: MultiExitNetwork,
    dataset: LongTailedDataset,
    policy: ExitPolicy,
    exit_loss,
    batch_size: int = 256,
):
    """Mean aggregated loss of examples grouped by their training exit index.

    Returns (stats per exit group, strictly_increasing verdict over the
    non-empty groups).
    """
    k_exits = net.num_exits
    sums = np.zeros(k_exits)
    counts = np.zeros(k_exits, dtype=np.int64)
    x = dataset.x.astype(np.float64)
    for start in range(0, dataset.total, batch_size):
        xb = x[start : start + batch_size]
        yb = dataset.y[start : start + batch_size]
        logits = net.forward_all(xb)
        total, traces, _, _ = elf_loss(logits, yb, exit_loss, policy)
        ks = np.array([tr.exit_index - 1 for tr in traces])
        sums += np.bincount(ks, weights=total, minlength=k_exits)
        counts += np.bincount(ks, minlength=k_exits)
    stats = [
        ExitGroupStats(k + 1, int(counts[k]), float(sums[k] / counts[k]))
        for k in range(k_exits)
        if counts[k] > 0
    ]
    means = [s.mean_loss for s in stats]
    increasing = all(a < b for a, b in zip(means, means[1:]))
    return stats, increasing


def confidence_histogram(
    net: MultiExitNetwork,
    dataset: LongTailedDataset,
    class_subsets: dict[str, list[int]],
    bins: int = 10,
    batch_size: int = 256,
):
    """Final-exit true-class confidence histogram, normalized per subset.

    Returns {subset name: (bin_edges, proportions)}.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    conf = np.empty(dataset.total)
    x = dataset.x.astype(np.float64)
    for start in range(0, dataset.total, batch_size):
        xb = x[start : start + batch_size]
        yb = dataset.y[start : start + batch_size]
        probs = softmax(net.forward_all(xb)[-1])
        conf[start : start + len(yb)] = probs[np.arange(len(yb)), yb]
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for name, classes in class_subsets.items():
        member = np.isin(dataset.y, classes)
        if not member.any():
            out[name] = (edges, np.zeros(bins))
            continue
        hist, _ = np.histogram(conf[member], bins=edges)
        out[name] = (edges, hist / member.sum())
    return out


def exit_assignments(traces, labels) -> list[tuple[int, int, int]]:
    """(example index, label, exit index) triples for CSV export."""
    return [(i, int(labels[i]), tr.exit_index) for i, tr in enumerate(traces)]


# --- CSV emitters (all floats with 6 significant digits) ---

def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def write_curve_csv(path, points: list[CurvePoint], k_exits: int, header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["s", "top1", "mean_flops"] + [f"exit_{k+1}" for k in range(k_exits)])
        for p in points:
            writer.writerow(
                [_fmt(p.s), _fmt(p.top1), _fmt(p.mean_flops)] + [int(v) for v in p.exit_histogram]
            )


def write_splits_csv(path, split: SplitAssignment, accuracies: dict, header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["split", "classes", "top1"])
        for tag in ("Many", "Medium", "Few"):
            acc = accuracies[tag]
            classes = " ".join(str(j) for j in split.classes(tag))
            writer.writerow([tag, classes, "absent" if acc is None else _fmt(acc)])
        writer.writerow(["All", "", _fmt(accuracies["All"])])


def write_property1_csv(path, stats: list[ExitGroupStats], header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["exit", "count", "mean_loss"])
        for s in stats:
            writer.writerow([s.exit_index, s.count, _fmt(s.mean_loss)])


def write_histogram_csv(path, histograms: dict, header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["subset", "bin_lo", "bin_hi", "proportion"])
        for name, (edges, props) in histograms.items():
            for i, p in enumerate(props):
                writer.writerow([name, _fmt(float(edges[i])), _fmt(float(edges[i + 1])), _fmt(float(p))])


def write_assignments_csv(path, assignments, header_lines=()):
    with open(path, "w", newline="") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        writer = csv.writer(f)
        writer.writerow(["example", "label", "exit"])
        writer.writerows(assignments)
