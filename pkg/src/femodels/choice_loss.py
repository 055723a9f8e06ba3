"""Multinomial logit head: softmax probabilities, cross-entropy and derivatives."""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from .errors import NumericError, ShapeError

PROB_FLOOR = 1e-15


class LossGrads(NamedTuple):
    """Per-observation derivatives of the summed loss w.r.t. utilities."""

    dV: np.ndarray
    d2V: np.ndarray


def softmax_probabilities(U) -> np.ndarray:
    """Row-wise softmax of an (n_obs, J) utility matrix."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] < 2:
        raise ShapeError(f"utilities must have shape (n_obs, J>=2), got {U.shape}")
    if not np.all(np.isfinite(U)):
        raise NumericError("non-finite utility")
    z = U - U.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def cel(P, y) -> float:
    """Mean negative log-likelihood ``-(1/N) sum_n ln P[n, y_n]``.

    Probabilities below ``PROB_FLOOR`` are clamped; a warning reports how
    many were.
    """
    P = np.asarray(P)
    y = np.asarray(y)
    if y.shape[0] == 0:
        return float("nan")
    p = P[np.arange(y.shape[0]), y]
    n_clamped = int(np.count_nonzero(p < PROB_FLOOR))
    if n_clamped:
        warnings.warn(f"cel: {n_clamped} probabilities clamped to {PROB_FLOOR}", RuntimeWarning)
        p = np.maximum(p, PROB_FLOOR)
    return float(-np.mean(np.log(p)))


def cel_grad_hess_wrt_utility(P, y) -> LossGrads:
    """``dV = P - onehot(y)`` and the diagonal hessian ``P (1 - P)``."""
    P = np.asarray(P, dtype=np.float64)
    dV = P.copy()
    dV[np.arange(P.shape[0]), y] -= 1.0
    return LossGrads(dV, P * (1.0 - P))


def chain_to_parameter_space(grads, x):
    """Gradient/hessian w.r.t. a coefficient multiplying ``x``.

    ``grads`` is a ``(dV, d2V)`` pair of per-observation columns for the
    utility the coefficient enters. Returns ``(dV * x, d2V * x**2)``.
    """
    dV, d2V = grads
    dV = np.asarray(dV, dtype=np.float64)
    d2V = np.asarray(d2V, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = np.full(dV.shape, float(x))
    if dV.shape != x.shape or d2V.shape != x.shape:
        raise ShapeError(f"x shape {x.shape} does not match gradient shape {dV.shape}")
    return dV * x, d2V * (x * x)
