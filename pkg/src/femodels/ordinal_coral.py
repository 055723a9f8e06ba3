"""CORAL ordinal head.

A single latent utility ``V`` is compared to ``J - 1`` increasing thresholds;
``sigmoid(V - tau_j)`` is the probability that the outcome exceeds level
``j``. Labels are coded ``0..J-1`` and binary task ``j`` (0-based) has label
``1(y > j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logit

from .choice_loss import PROB_FLOOR
from .errors import ConfigError, StateError

MIN_GAP = 1e-6


@dataclass(frozen=True, eq=False)
class CoralHead:
    thresholds: np.ndarray

    def __post_init__(self):
        tau = np.array(self.thresholds, dtype=np.float64).ravel()
        if tau.size < 1:
            raise ConfigError("CORAL needs at least one threshold (J >= 2)")
        tau.setflags(write=False)
        object.__setattr__(self, "thresholds", tau)

    @property
    def n_classes(self) -> int:
        return self.thresholds.size + 1

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.thresholds) > 0))

    @classmethod
    def from_frequencies(cls, y, n_classes: int) -> "CoralHead":
        """Thresholds that calibrate every binary task at ``V = 0``.

        ``tau_j = logit(P(y <= j))`` from empirical class frequencies,
        clipped away from 0 and 1 and made strictly increasing.
        """
        counts = np.bincount(np.asarray(y), minlength=n_classes).astype(np.float64)
        cum = np.cumsum(counts)[:-1] / max(counts.sum(), 1.0)
        cum = np.clip(cum, 1e-4, 1 - 1e-4)
        return cls(project_sorted(logit(cum)))


class OrdinalPrediction(NamedTuple):
    class_probs: np.ndarray
    exceed_probs: np.ndarray
    point_class: np.ndarray


def project_sorted(tau, gap: float = MIN_GAP) -> np.ndarray:
    """Restore strictly increasing thresholds with minimum spacing ``gap``.

    Adjacent violating pairs are pooled (replaced by their mean) and then
    spread symmetrically by ``gap`` around that mean, repeating until the
    sequence is ordered.
    """
    tau = np.array(tau, dtype=np.float64)
    # pool-adjacent-violators on the gap-adjusted sequence
    k = tau.size
    offs = gap * np.arange(k)
    z = tau - offs
    blocks = []  # (mean, size)
    for v in z:
        blocks.append([v, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, n2 = blocks.pop()
            m1, n1 = blocks.pop()
            blocks.append([(m1 * n1 + m2 * n2) / (n1 + n2), n1 + n2])
    out = np.concatenate([np.full(n, m) for m, n in blocks]) + offs
    return out


def coral_probabilities(V, head: CoralHead) -> OrdinalPrediction:
    if not head.is_sorted():
        raise StateError("CORAL thresholds are not strictly increasing")
    V = np.asarray(V, dtype=np.float64).ravel()
    exceed = expit(V[:, None] - head.thresholds[None, :])
    n = V.shape[0]
    J = head.n_classes
    probs = np.empty((n, J))
    probs[:, 0] = 1.0 - exceed[:, 0]
    probs[:, 1:-1] = exceed[:, :-1] - exceed[:, 1:]
    probs[:, -1] = exceed[:, -1]
    point = np.count_nonzero(exceed > 0.5, axis=1)
    return OrdinalPrediction(probs, exceed, point)


def binary_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    return (y[:, None] > np.arange(n_classes - 1)[None, :]).astype(np.float64)


def mcel(pred: OrdinalPrediction, y) -> float:
    """Binary cross-entropy averaged over observations and the ``J - 1`` tasks."""
    p = np.clip(pred.exceed_probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    b = binary_labels(y, p.shape[1] + 1)
    if b.shape[0] == 0:
        return float("nan")
    return float(-np.mean(b * np.log(p) + (1.0 - b) * np.log1p(-p)))


def mcel_grad_hess_wrt_utility(pred: OrdinalPrediction, y):
    """Per-observation derivatives of the per-task-averaged loss w.r.t. ``V``."""
    s = pred.exceed_probs
    b = binary_labels(y, s.shape[1] + 1)
    k = s.shape[1]
    dV = (s - b).sum(axis=1) / k
    d2V = (s * (1.0 - s)).sum(axis=1) / k
    return dV, d2V


def mcel_grad_hess_wrt_thresholds(pred: OrdinalPrediction, y):
    """Derivatives of ``mcel`` (the mean over observations) w.r.t. each threshold."""
    s = pred.exceed_probs
    b = binary_labels(y, s.shape[1] + 1)
    k = s.shape[1]
    n = max(s.shape[0], 1)
    grad = (b - s).sum(axis=0) / (n * k)
    hess = (s * (1.0 - s)).sum(axis=0) / (n * k)
    return grad, hess


def update_thresholds(head: CoralHead, pred: OrdinalPrediction, y, step) -> CoralHead:
    """One gradient step on the thresholds followed by the ordering projection.

    ``step`` is a scalar or one step size per threshold.
    """
    step = np.asarray(step, dtype=np.float64)
    if np.any(step < 0):
        raise ConfigError("threshold step must be non-negative")
    grad, _ = mcel_grad_hess_wrt_thresholds(pred, y)
    tau = head.thresholds - step * grad
    if np.all(np.diff(tau) >= MIN_GAP):
        return CoralHead(tau)
    return CoralHead(project_sorted(tau))


def mae(point_classes, y) -> float:
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(point_classes))))


def emae(class_probs, y, squared: bool = True) -> float:
    """Probability-weighted class distance.

    With ``squared=True`` (the default) distances are ``(j - y)**2``;
    ``squared=False`` uses ``|j - y|``.
    """
    P = np.asarray(class_probs)
    y = np.asarray(y)
    d = np.arange(P.shape[1])[None, :] - y[:, None]
    d = d * d if squared else np.abs(d)
    return float(np.mean((P * d).sum(axis=1)))
