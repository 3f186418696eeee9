"""Clustering metrics: Hungarian-matched accuracy, NMI, ARI, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class Contingency:
    counts: np.ndarray
    n: int


def _labels(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size and (np.any(arr < 0) or np.any(arr != np.round(arr))):
        raise DimensionError(f"{name} labels must be non-negative integers")
    return arr.astype(np.int64)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred, truth = _labels(pred, "pred"), _labels(truth, "truth")
    if pred.shape != truth.shape:
        raise DimensionError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    return pred, truth


def contingency(pred, truth, size: int | None = None) -> np.ndarray:
    """Counts of (pred, truth) label pairs, rows indexed by pred."""
    pred, truth = _pair(pred, truth)
    kp = int(pred.max(initial=-1)) + 1
    kt = int(truth.max(initial=-1)) + 1
    shape = (max(kp, size or 0), max(kt, size or 0))
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(counts, (pred, truth), 1)
    return counts


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment on a square matrix.

    Shortest augmenting path with row/column potentials, O(k^3).
    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"hungarian needs a square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DimensionError("hungarian: cost matrix has non-finite entries")
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[col] = row, 1-based, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


def best_mapping(pred, truth) -> np.ndarray:
    """Bijection from predicted cluster ids to truth ids maximising agreement."""
    counts = contingency(pred, truth)
    k = max(counts.shape)
    square = np.zeros((k, k), dtype=np.int64)
    square[:counts.shape[0], :counts.shape[1]] = counts
    return hungarian(-square)


def clustering_accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        return 0.0
    mapping = best_mapping(pred, truth)
    return float(np.mean(mapping[pred] == truth))


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Mutual information over the geometric mean of the two entropies (nats)."""
    pred, truth = _pair(pred, truth)
    n = pred.size
    if n == 0:
        return 0.0
    counts = contingency(pred, truth).astype(np.float64)
    h_pred = _entropy(counts.sum(axis=1), n)
    h_truth = _entropy(counts.sum(axis=0), n)
    denom = np.sqrt(h_pred * h_truth)
    if denom == 0:
        return 0.0
    joint = counts / n
    outer = np.outer(counts.sum(axis=1), counts.sum(axis=0)) / n**2
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return float(min(max(mi / denom, 0.0), 1.0))


def _comb2(x) -> np.ndarray | float:
    return x * (x - 1) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index from the contingency table."""
    pred, truth = _pair(pred, truth)
    n = pred.size
    if n < 2:
        return 1.0
    counts = contingency(pred, truth).astype(np.float64)
    index = float(np.sum(_comb2(counts)))
    a = float(np.sum(_comb2(counts.sum(axis=1))))
    b = float(np.sum(_comb2(counts.sum(axis=0))))
    expected = a * b / _comb2(float(n))
    max_index = 0.5 * (a + b)
    if max_index == expected:
        # both partitions trivial in the same way (all singletons or one block)
        return 1.0
    return (index - expected) / (max_index - expected)


def confusion(pred, truth, mapping=None) -> Contingency:
    """Contingency after relabelling ``pred`` through ``mapping`` (Hungarian by default)."""
    pred, truth = _pair(pred, truth)
    if mapping is None:
        mapping = best_mapping(pred, truth)
    mapping = np.asarray(mapping)
    k = max(len(mapping), int(truth.max(initial=-1)) + 1)
    return Contingency(contingency(mapping[pred], truth, size=k), int(pred.size))
