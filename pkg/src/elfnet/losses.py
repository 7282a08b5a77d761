"""Class-reweighted exit losses: weighted cross-entropy, focal, and LDAM.

Every loss works on batches of logits, returns the per-example loss and the
analytic gradient with respect to the logits, and is pure (no internal
state). Class weights follow the effective-number scheme
w_j = (1 - beta) / (1 - beta^{n_j}), mean-normalized so the average weight
is 1 and the global loss scale stays comparable across weighting schemes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError
from .layers import softmax


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray
    beta: float | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if (w <= 0).any():
            raise ConfigurationError("class weights must be positive")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, c: int) -> "ClassWeights":
        return cls(np.ones(c))


def effective_weights(counts: np.ndarray | list[int], beta: float) -> ClassWeights:
    """Effective-number weights (1-beta)/(1-beta^n), mean-normalized to 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ConfigurationError("all class counts must be >= 1")
    if not 0.0 <= beta < 1.0:
        raise ConfigurationError(f"beta must be in [0, 1), got {beta}")
    if beta == 0.0:
        raw = np.ones_like(counts)
    else:
        raw = (1.0 - beta) / (1.0 - beta**counts)
    return ClassWeights(raw / raw.mean(), beta=beta)


@dataclass(frozen=True)
class MarginVector:
    """Per-class LDAM margins delta_j = C_const / n_j, capped at max_margin."""

    delta: np.ndarray
    c_const: float


def ldam_margins(counts: np.ndarray | list[int], max_margin: float = 0.5) -> MarginVector:
    """Margins inversely proportional to class size; rarest class gets the cap."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 1).any():
        raise ConfigurationError("all class counts must be >= 1")
    c_const = max_margin * counts.min()
    return MarginVector(c_const / counts, c_const)


def weighted_ce(logits: np.ndarray, y: np.ndarray, weights: ClassWeights):
    """Class-weighted negative log-likelihood.

    Returns (loss, grad) where loss has shape (batch,) and grad matches
    logits. grad = w_y * (softmax(logits) - onehot(y)).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(y)
    p = softmax(logits)
    w_y = weights.w[y]
    batch = np.arange(len(y))
    loss = -w_y * np.log(p[batch, y])
    grad = p.copy()
    grad[batch, y] -= 1.0
    grad *= w_y[:, None]
    return loss, grad


def focal(logits: np.ndarray, y: np.ndarray, weights: ClassWeights, gamma: float):
    """Focal loss -w_y (1 - p_y)^gamma log p_y with its analytic gradient."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    if gamma == 0:
        return weighted_ce(logits, y, weights)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(y)
    p = softmax(logits)
    batch = np.arange(len(y))
    p_y = p[batch, y]
    u = 1.0 - p_y
    w_y = weights.w[y]
    log_p = np.log(p_y)
    loss = -w_y * u**gamma * log_p

    # dL/dp_y, with the u^(gamma-1) singularity at p_y = 1 suppressed:
    # there the log factor vanishes faster for gamma < 1 inputs we ever see.
    with np.errstate(divide="ignore", invalid="ignore"):
        dl_dp = w_y * (gamma * u ** (gamma - 1.0) * log_p - u**gamma / p_y)
        dl_dp = np.where(u == 0.0, 0.0, dl_dp)

    # dp_y/dz_j = p_y (1[j=y] - p_j)
    grad = -p * p_y[:, None]
    grad[batch, y] += p_y
    grad *= dl_dp[:, None]
    return loss, grad


def ldam(logits: np.ndarray, y: np.ndarray, weights: ClassWeights, margins: MarginVector):
    """LDAM loss: weighted CE on logits with z_y shifted down by the margin."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64)).copy()
    y = np.atleast_1d(y)
    logits[np.arange(len(y)), y] -= margins.delta[y]
    return weighted_ce(logits, y, weights)


@dataclass(frozen=True)
class DrwSchedule:
    """Delayed reweighting: uniform weights below the switch epoch, target after."""

    switch_epoch: int
    target: ClassWeights

    def weights_at(self, epoch: int) -> ClassWeights:
        if epoch < 0:
            raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
        if epoch < self.switch_epoch:
            return ClassWeights.uniform(len(self.target.w))
        return self.target


drw_weights = DrwSchedule.weights_at
