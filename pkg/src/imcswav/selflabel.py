"""Prototype codes and balanced self-labelling targets.

Orientation: every matrix here is ``samples x prototypes`` (m x k').
The transport polytope is the set of non-negative m x k' matrices whose
rows sum to 1/m and whose columns sum to 1/k'. Targets returned by
:func:`sinkhorn_targets` are rescaled by m so each row is a distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, l2_normalize_rows, matmul, softmax_rows, transpose
from .errors import DimensionError, NumericalError, ParameterError

DEFAULT_TEMPERATURE = 0.1
DEFAULT_EPSILON = 0.05
DEFAULT_SINKHORN_ITERS = 3


@dataclass
class Codes:
    """Row-stochastic prototype assignment of one view.

    ``scores`` holds the detached cosine similarities the softmax was
    taken over; Sinkhorn consumes those rather than ``u``.
    """

    u: Tensor
    scores: np.ndarray
    view_index: int = 0


@dataclass
class Targets:
    q: np.ndarray
    epsilon: float
    iterations: int
    view_index: int = 0


def cosine_scores(z: Tensor, prototypes: Tensor) -> Tensor:
    if z.shape[1] != prototypes.shape[1]:
        raise DimensionError(f"feature width {z.shape} does not match prototypes {prototypes.shape}")
    return matmul(l2_normalize_rows(z), transpose(l2_normalize_rows(prototypes)))


def compute_codes(z: Tensor, prototypes: Tensor, temperature: float = DEFAULT_TEMPERATURE,
                  view_index: int = 0) -> Codes:
    """Softmax over prototypes of temperature-scaled cosine similarity."""
    scores = cosine_scores(z, prototypes)
    return Codes(softmax_rows(scores, temperature), scores.data.copy(), view_index)


def sinkhorn_targets(scores, epsilon: float = DEFAULT_EPSILON, iterations: int = DEFAULT_SINKHORN_ITERS,
                     view_index: int = 0) -> Targets:
    """Entropic OT assignment of m samples onto k' equally-weighted prototypes.

    Parameters
    ----------
    scores : array-like or Tensor of shape (m, k')
        Sample/prototype similarities. Never differentiated through.
    epsilon : float
        Entropy weight; the kernel is ``exp(scores / epsilon)``.
    iterations : int
        Number of (column, row) scaling rounds.

    Returns
    -------
    Targets
        ``q`` with rows summing to exactly 1 and columns to roughly m/k'.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got shape {s.shape}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(s)):
        raise NumericalError("sinkhorn: non-finite scores at iteration 0")
    m, k = s.shape

    # Per-row max subtraction + row normalisation: a row scaling, so it leaves
    # the fixed point unchanged and makes the result exactly invariant to
    # per-row shifts of the scores.
    logits = s / epsilon
    kernel = np.exp(logits - logits.max(axis=1, keepdims=True))
    q = kernel / (m * kernel.sum(axis=1, keepdims=True))
    for it in range(1, iterations + 1):
        q *= (1.0 / k) / q.sum(axis=0, keepdims=True)
        q *= (1.0 / m) / q.sum(axis=1, keepdims=True)
        if not np.all(np.isfinite(q)):
            raise NumericalError(f"sinkhorn: non-finite values at iteration {it}")
    q *= m
    return Targets(q, float(epsilon), int(iterations), view_index)


def marginal_residual(targets: Targets | np.ndarray) -> tuple[float, float]:
    """Max deviation of row sums from 1 and of column sums from m/k'."""
    q = targets.q if isinstance(targets, Targets) else np.asarray(targets, dtype=np.float64)
    m, k = q.shape
    row = float(np.max(np.abs(q.sum(axis=1) - 1.0)))
    col = float(np.max(np.abs(q.sum(axis=0) - m / k)))
    return row, col
