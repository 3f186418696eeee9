"""Synthetic mixtures, multi-crop style views, batching and dataset files."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import container
from .errors import ConfigError, ContainerError, ParameterError


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 2000
    input_dim: int = 32
    k_true: int = 4
    separation: float = 10.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.n >= self.k_true >= 2:
            raise ConfigError(f"need n >= k_true >= 2, got n={self.n}, k_true={self.k_true}")
        if not self.separation > 0:
            raise ConfigError(f"separation must be positive, got {self.separation}")


@dataclass(frozen=True)
class ViewConfig:
    n_high: int = 2
    n_low: int = 4
    high_keep_fraction: float = 0.75
    low_keep_fraction: float = 0.35
    jitter_std: float = 0.1
    mask_prob: float = 0.1

    def __post_init__(self):
        if self.n_high < 2:
            raise ConfigError(f"n_high must be >= 2, got {self.n_high}")
        if self.n_low < 0:
            raise ConfigError(f"n_low must be >= 0, got {self.n_low}")
        if not 0 < self.high_keep_fraction <= 1:
            raise ConfigError(f"high_keep_fraction must lie in (0, 1], got {self.high_keep_fraction}")
        if self.n_low and not 0 < self.low_keep_fraction < self.high_keep_fraction:
            raise ConfigError("low_keep_fraction must lie in (0, high_keep_fraction)")
        if self.jitter_std < 0 or not 0 <= self.mask_prob < 1:
            raise ConfigError("jitter_std must be >= 0 and mask_prob in [0, 1)")

    @property
    def n_views(self) -> int:
        return self.n_high + self.n_low

    def keep_fraction(self, view_index: int) -> float:
        return self.high_keep_fraction if view_index < self.n_high else self.low_keep_fraction


@dataclass
class ViewSetBatch:
    views: list[np.ndarray]
    sample_ids: np.ndarray
    seed: int

    @property
    def n_views(self) -> int:
        return len(self.views)


def gen_synthetic(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs around centroids on a sphere of radius separation*noise_std."""
    rng = np.random.default_rng(spec.seed)
    centroids = _centroids(spec, rng)
    # balanced: floor(n/k) each, remainder dealt round-robin
    labels = np.arange(spec.n) % spec.k_true
    labels = labels[rng.permutation(spec.n)]
    features = centroids[labels] + spec.noise_std * rng.standard_normal((spec.n, spec.input_dim))
    return features, labels.astype(np.int64)


def synthetic_centroids(spec: DatasetSpec) -> np.ndarray:
    """The generating centroids of :func:`gen_synthetic` for the same spec."""
    return _centroids(spec, np.random.default_rng(spec.seed))


def _centroids(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    directions = rng.standard_normal((spec.k_true, spec.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (spec.separation * spec.noise_std)


def _view_rng(seed: int, sample_id: int, view_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(sample_id), int(view_index)])


def transform_row(x: np.ndarray, keep_fraction: float, jitter_std: float, mask_prob: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Window crop (zero outside, rescale inside), Gaussian jitter, random occlusion."""
    d = x.shape[0]
    width = min(d, max(1, int(round(keep_fraction * d))))
    start = int(rng.integers(0, d - width + 1))
    out = np.zeros(d)
    window = slice(start, start + width)
    out[window] = x[window] / keep_fraction
    if jitter_std > 0:
        out[window] += rng.normal(0.0, jitter_std, width)
    if mask_prob > 0:
        drop = rng.random(width) < mask_prob
        out[window][drop] = 0.0
    return out


def make_views(rows: np.ndarray, cfg: ViewConfig, seed: int, sample_ids=None) -> ViewSetBatch:
    """Build ``cfg.n_views`` transformed copies of each row, high resolution views first.

    The transform for (sample, view) is drawn from a generator keyed on
    ``(seed, sample_id, view_index)`` alone, so results do not depend on
    batch composition or evaluation order.
    """
    rows = np.asarray(rows, dtype=np.float64)
    ids = np.arange(rows.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    views = []
    for v in range(cfg.n_views):
        keep = cfg.keep_fraction(v)
        views.append(np.stack([
            transform_row(row, keep, cfg.jitter_std, cfg.mask_prob, _view_rng(seed, sid, v))
            for row, sid in zip(rows, ids)
        ]))
    return ViewSetBatch(views, ids, int(seed))


def batches(n: int, batch_size: int, epoch_seed: int) -> Iterator[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into full batches; the short tail is dropped."""
    if batch_size > n:
        raise ParameterError(f"batch_size {batch_size} exceeds dataset size {n}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for i in range(n // batch_size):
        yield order[i * batch_size:(i + 1) * batch_size]


def train_val_split(n: int, seed: int, val_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([int(seed), 0x5B17]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def save_dataset(path, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if features.shape[0] != labels.shape[0]:
        raise ParameterError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
    container.save(path, {"features": features, "labels": labels})


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    arrays = container.load(path)
    if "features" not in arrays or "labels" not in arrays:
        raise ContainerError("dataset file needs 'features' and 'labels' arrays")
    labels = arrays["labels"].reshape(-1)
    return arrays["features"], labels.astype(np.int64)
