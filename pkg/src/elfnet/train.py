"""SGD training loop with linear warmup, step decay, and delayed reweighting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LongTailedDataset
from .exceptions import ConfigurationError, NumericalAbort
from .exits import ExitPolicy, elf_loss
from .losses import (
    ClassWeights,
    DrwSchedule,
    MarginVector,
    effective_weights,
    focal,
    ldam,
    ldam_margins,
    weighted_ce,
)
from .model import MultiExitNetwork

LOSS_NAMES = ("ce", "focal", "ldam")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.1
    lr_decay: tuple[tuple[int, float], ...] = ()
    warmup_epochs: int = 5
    weight_decay: float = 2e-4
    momentum: float = 0.9
    seed: int = 0
    loss: str = "ce"
    beta: float = 0.9999
    gamma: float = 0.5
    max_margin: float = 0.5
    drw_epoch: int | None = None  # None disables reweighting entirely
    train_threshold: float | None = None  # None -> loss-dependent default
    infer_threshold: float = 0.5
    elf: bool = True  # False: plain training, loss on the final exit only

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ConfigurationError(f"loss must be one of {LOSS_NAMES}, got {self.loss!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        for epoch, _ in self.lr_decay:
            if epoch >= self.epochs:
                raise ConfigurationError(
                    f"decay epoch {epoch} is not < epochs ({self.epochs})"
                )

    def resolved_train_threshold(self, num_classes: int) -> float:
        if self.train_threshold is not None:
            return self.train_threshold
        return 2.0 / num_classes if self.loss == "ldam" else 0.9


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear ramp 0 -> lr over warmup, then step decays."""
    if not 0 <= epoch < config.epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * (epoch + 1) / config.warmup_epochs
    lr = config.lr
    for decay_epoch, factor in config.lr_decay:
        if epoch >= decay_epoch:
            lr *= factor
    return lr


def sgd_step(net: MultiExitNetwork, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + grad + wd*w;  w <- w - lr*v."""
    for p in net.parameters():
        p.vel_weights *= momentum
        p.vel_weights += p.grad_weights + weight_decay * p.weights
        p.weights -= lr * p.vel_weights
        p.vel_bias *= momentum
        p.vel_bias += p.grad_bias + weight_decay * p.bias
        p.bias -= lr * p.vel_bias


def make_exit_loss(config: TrainConfig, weights: ClassWeights, margins: MarginVector | None):
    """Bind the configured loss into an (logits, y) -> (loss, grad) callable."""
    if config.loss == "ce":
        return lambda logits, y: weighted_ce(logits, y, weights)
    if config.loss == "focal":
        return lambda logits, y: focal(logits, y, weights, config.gamma)
    return lambda logits, y: ldam(logits, y, weights, margins)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss_per_exit: np.ndarray  # mean over examples that reached the exit
    exit_histogram: np.ndarray
    train_top1: float
    mean_total_loss: float = 0.0


@dataclass
class TrainResult:
    net: MultiExitNetwork
    epochs: list[EpochLog] = field(default_factory=list)


def train(net: MultiExitNetwork, dataset: LongTailedDataset, config: TrainConfig) -> TrainResult:
    """Train the multi-exit network with the ELF loss.

    Per epoch: seeded shuffle, forward all exits per batch, mask per-example
    exit losses by the training criterion, backprop the masked gradients,
    one SGD step per batch. Mean losses are normalized by batch size.
    """
    if dataset.num_classes != net.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes, network expects "
            f"{net.num_classes}"
        )
    c = net.num_classes
    t = config.resolved_train_threshold(c)
    policy = ExitPolicy.uniform(net.num_exits, t, config.infer_threshold)
    margins = ldam_margins(dataset.class_counts, config.max_margin) if config.loss == "ldam" else None
    schedule = None
    if config.drw_epoch is not None:
        schedule = DrwSchedule(config.drw_epoch, effective_weights(dataset.class_counts, config.beta))
    uniform = ClassWeights.uniform(c)

    rng = np.random.default_rng(config.seed)
    # canonical example order: sort by (label, lexicographic payload) so
    # training is invariant to the storage order of the input file
    order = _canonical_order(dataset)
    # compute in whatever precision the network was built with
    dtype = net.parameters()[0].weights.dtype
    x_all = dataset.x[order].astype(dtype)
    y_all = dataset.y[order]
    n = len(y_all)

    result = TrainResult(net=net)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        weights = schedule.weights_at(epoch) if schedule is not None else uniform
        exit_loss = make_exit_loss(config, weights, margins)
        perm = rng.permutation(n)
        loss_sums = np.zeros(net.num_exits)
        reach_counts = np.zeros(net.num_exits)
        exit_hist = np.zeros(net.num_exits, dtype=np.int64)
        correct = 0
        total_loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            net.zero_grad()
            if config.elf:
                logits = net.forward_all(xb)
                total, traces, mask, grads = elf_loss(logits, yb, exit_loss, policy)
                final_logits = logits[-1]
            else:
                # plain baseline: evaluate and train the final exit only
                h = xb
                for k in range(net.num_exits):
                    h = net.run_segment(k, h)
                final_logits = net.run_head(net.num_exits - 1, h)
                total, grad = exit_loss(final_logits, yb)
                traces = None
                grads = [None] * (net.num_exits - 1) + [grad]
            batch_loss = float(total.sum())
            if not np.isfinite(batch_loss):
                raise NumericalAbort(
                    "non-finite training loss", epoch, start // config.batch_size, lr
                )
            # losses are computed in float64; bring grads back to compute dtype
            net.backward_all([
                None if g is None else (g / len(idx)).astype(dtype, copy=False)
                for g in grads
            ])
            sgd_step(net, lr, config.momentum, config.weight_decay)

            if traces is not None:
                per_exit = np.stack([tr.exit_index for tr in traces])
                exit_hist += np.bincount(per_exit - 1, minlength=net.num_exits)
                for tr in traces:
                    reached = len(tr.per_exit_loss)
                    loss_sums[:reached] += tr.per_exit_loss
                    reach_counts[:reached] += 1
            else:
                exit_hist[-1] += len(idx)
                loss_sums[-1] += batch_loss
                reach_counts[-1] += len(idx)
            total_loss_sum += batch_loss
            correct += int((np.argmax(final_logits, axis=1) == yb).sum())
        result.epochs.append(
            EpochLog(
                epoch=epoch,
                lr=lr,
                mean_loss_per_exit=np.divide(
                    loss_sums, reach_counts, out=np.zeros_like(loss_sums),
                    where=reach_counts > 0,
                ),
                exit_histogram=exit_hist,
                train_top1=100.0 * correct / n,
                mean_total_loss=total_loss_sum / n,
            )
        )
    return result


def _canonical_order(dataset: LongTailedDataset) -> np.ndarray:
    flat = dataset.x.reshape(len(dataset.x), -1)
    keys = [flat[:, j] for j in range(flat.shape[1] - 1, -1, -1)]
    keys.append(dataset.y)
    return np.lexsort(keys)
