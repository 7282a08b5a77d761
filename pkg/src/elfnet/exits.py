"""Early-exit logic: training criterion, loss aggregation, inference routing.

Training criterion (per exit k): the example leaves the loss sum when its
prediction is correct AND the true-class confidence strictly exceeds t_k.
Inference criterion: the maximum confidence strictly exceeds s_k; labels
are never consulted. When no criterion fires, the example falls through to
the last exit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError
from .layers import softmax


@dataclass(frozen=True)
class ExitPolicy:
    """Per-exit thresholds: t for training, s for inference, both in [0, 1]."""

    train_thresholds: np.ndarray
    infer_thresholds: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.train_thresholds, dtype=np.float64)
        s = np.asarray(self.infer_thresholds, dtype=np.float64)
        if t.shape != s.shape or t.ndim != 1 or len(t) == 0:
            raise ConfigurationError(
                f"threshold vectors must be equal-length and non-empty, "
                f"got {t.shape} and {s.shape}"
            )
        for name, v in (("train", t), ("inference", s)):
            if ((v < 0) | (v > 1)).any():
                raise ConfigurationError(f"{name} thresholds must lie in [0, 1]")
        object.__setattr__(self, "train_thresholds", t)
        object.__setattr__(self, "infer_thresholds", s)

    @classmethod
    def uniform(cls, num_exits: int, t: float, s: float) -> "ExitPolicy":
        if num_exits < 1:
            raise ConfigurationError(f"need at least one exit, got {num_exits}")
        return cls(np.full(num_exits, t), np.full(num_exits, s))

    @property
    def num_exits(self) -> int:
        return len(self.train_thresholds)


@dataclass
class ExitTrace:
    """Per-example record of where it exited and what it cost."""

    exit_index: int  # 1-based
    per_exit_confidence: np.ndarray
    per_exit_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    total_loss: float = 0.0
    flops: int = 0


def train_exit_criterion(probs: np.ndarray, y: int, t_k: float) -> bool:
    """True iff argmax(probs) == y and probs[y] > t_k (strict)."""
    probs = np.asarray(probs)
    return int(np.argmax(probs)) == int(y) and probs[int(y)] > t_k


def infer_exit_criterion(probs: np.ndarray, s_k: float) -> bool:
    """True iff max(probs) > s_k (strict); label-free."""
    return float(np.max(probs)) > s_k


def training_exit_indices(
    per_exit_logits: list[np.ndarray], y: np.ndarray, policy: ExitPolicy
) -> np.ndarray:
    """Vectorized first-firing-exit (1-based) per example; K when none fires."""
    k_exits = policy.num_exits
    y = np.atleast_1d(y)
    out = np.full(len(y), k_exits, dtype=np.int64)
    undecided = np.ones(len(y), dtype=bool)
    batch = np.arange(len(y))
    for k in range(k_exits):
        probs = softmax(np.atleast_2d(per_exit_logits[k]))
        fired = (np.argmax(probs, axis=1) == y) & (
            probs[batch, y] > policy.train_thresholds[k]
        )
        newly = undecided & fired
        out[newly] = k + 1
        undecided &= ~fired
    return out


def elf_loss(per_exit_logits: list[np.ndarray], y, exit_loss, policy: ExitPolicy):
    """Aggregate loss over exits 1..k_e, the first exit whose criterion fires.

    exit_loss(logits, y) -> (per-example loss, gradient wrt logits).
    Returns (total_loss per example, traces, gradient mask of shape
    (batch, K)); gradients for exits beyond k_e are masked to zero.
    """
    if len(per_exit_logits) != policy.num_exits:
        raise ConfigurationError(
            f"got {len(per_exit_logits)} exit logit tensors for "
            f"{policy.num_exits} exits"
        )
    y = np.atleast_1d(y)
    batch = len(y)
    k_exits = policy.num_exits
    exit_idx = training_exit_indices(per_exit_logits, y, policy)
    mask = (np.arange(1, k_exits + 1)[None, :] <= exit_idx[:, None]).astype(np.float64)

    losses = np.zeros((batch, k_exits))
    confidences = np.zeros((batch, k_exits))
    grads = []
    rows = np.arange(batch)
    for k in range(k_exits):
        logits = np.atleast_2d(per_exit_logits[k])
        loss_k, grad_k = exit_loss(logits, y)
        losses[:, k] = loss_k
        confidences[:, k] = softmax(logits)[rows, y]
        grads.append(grad_k * mask[:, k][:, None])

    total = (losses * mask).sum(axis=1)
    traces = [
        ExitTrace(
            exit_index=int(exit_idx[i]),
            per_exit_confidence=confidences[i].copy(),
            per_exit_loss=losses[i, : exit_idx[i]].copy(),
            total_loss=float(total[i]),
        )
        for i in range(batch)
    ]
    return total, traces, mask, grads


def predict(x: np.ndarray, net, policy: ExitPolicy):
    """Route one example (or a batch of one-at-a-time examples) to its exit.

    Evaluates backbone segments and exit heads sequentially, stopping at the
    first exit whose inference criterion fires; later segments are never
    computed, and the reported FLOPs cover only what actually ran.
    Returns (predicted class array, probs array, list of ExitTrace).
    """
    if net.num_exits != policy.num_exits:
        raise ConfigurationError(
            f"network has {net.num_exits} exits but policy has {policy.num_exits}"
        )
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    flop_table = net.flops_table()
    n = len(x)
    preds = np.empty(n, dtype=np.int64)
    all_probs = np.empty((n, net.num_classes))
    traces = []
    for i in range(n):
        h = x[i : i + 1]
        confidences = np.full(net.num_exits, np.nan)
        chosen = net.num_exits
        probs = None
        for k in range(net.num_exits):
            h = net.run_segment(k, h)
            logits = net.run_head(k, h)
            probs = softmax(logits)[0]
            confidences[k] = probs.max()
            if k + 1 == net.num_exits or infer_exit_criterion(probs, policy.infer_thresholds[k]):
                chosen = k + 1
                break
        preds[i] = int(np.argmax(probs))
        all_probs[i] = probs
        traces.append(
            ExitTrace(
                exit_index=chosen,
                per_exit_confidence=confidences,
                flops=int(flop_table.cumulative_exit_flops[chosen - 1]),
            )
        )
    return preds, all_probs, traces
