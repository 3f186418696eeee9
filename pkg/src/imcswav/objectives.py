"""Training losses: swapped prediction, MI clustering, logit penalty, JSD."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor
from .errors import ConfigError, DimensionError, ParameterError
from .selflabel import Codes, Targets

DEFAULT_BETA = 4.0
DEFAULT_ALPHA = 1e-2
DEFAULT_LOGIT_THRESHOLD = 5.0


@dataclass
class LossReport:
    swap_loss: float
    cluster_loss: float
    penalty: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class ViewBundle:
    """Per-view outputs of one minibatch.

    ``codes``, ``posteriors`` and ``logits`` have one entry per view, high
    resolution views first. ``targets`` covers the high resolution views
    only, so ``targets[t]`` belongs to view ``t``.
    """

    codes: list[Codes]
    targets: list[Targets]
    posteriors: list[Tensor]
    logits: list[Tensor] = field(default_factory=list)
    # when set, the clustering loss reads these code values instead of codes[i].u
    cluster_codes: list[np.ndarray] | None = None

    @property
    def n_views(self) -> int:
        return len(self.codes)

    @property
    def n_high(self) -> int:
        return len(self.targets)


def _safe_log(x: Tensor) -> Tensor:
    return ad.log(ad.max_with_constant(x, PROB_FLOOR))


def cross_entropy(q: np.ndarray, u: Tensor) -> Tensor:
    """``-(1/m) sum_i sum_j q[i, j] log u[i, j]`` with the log floor."""
    if q.shape != u.shape:
        raise DimensionError(f"target shape {q.shape} does not match codes {u.shape}")
    m = u.shape[0]
    return ad.scale(ad.sum_all(ad.mul(Tensor(q), _safe_log(u))), -1.0 / m)


def swap_loss(bundle: ViewBundle) -> Tensor:
    """Average swapped cross-entropy over every (target view, other view) pair."""
    if bundle.n_high < 2:
        raise ConfigError(f"swapped prediction needs at least 2 high resolution views, got {bundle.n_high}")
    logs = [_safe_log(c.u) for c in bundle.codes]
    m = bundle.codes[0].u.shape[0]
    terms = []
    for t, target in enumerate(bundle.targets):
        q = Tensor(target.q)
        for v, log_u in enumerate(logs):
            if v != t:
                terms.append(ad.sum_all(ad.mul(q, log_u)))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return ad.scale(total, -1.0 / (m * len(terms)))


def mi_cluster_loss(bundle: ViewBundle, beta: float = DEFAULT_BETA) -> Tensor:
    """Negative mutual information between posteriors and codes over all view pairs.

    Evaluates ``(1/V^2) sum_{i,j} [H(Y^j | U^i) - beta H(Y^j)]`` where the
    joint of view j's posterior and view i's codes is ``Y^j.T @ U^i / m``.
    Codes are detached; only the posteriors carry gradient.

    All V^2 joints are formed at once: with posteriors laid side by side
    (m x Vk) and codes likewise (m x Vk'), block (j, i) of their product is
    the joint for that pair.
    """
    if beta < 0:
        raise ParameterError(f"beta must be non-negative, got {beta}")
    V = bundle.n_views
    if len(bundle.posteriors) != V:
        raise DimensionError(f"{len(bundle.posteriors)} posteriors for {V} views")
    m = bundle.posteriors[0].shape[0]
    k = bundle.posteriors[0].shape[1]
    for y, c in zip(bundle.posteriors, bundle.codes):
        if y.shape[1] != k or y.shape[0] != m or c.u.shape[0] != m:
            raise DimensionError(f"posterior {y.shape} / codes {c.u.shape} mismatch (k={k}, m={m})")

    code_values = bundle.cluster_codes or [c.u.data for c in bundle.codes]
    codes = np.concatenate(code_values, axis=1)
    log_pu = np.log(np.maximum(codes.mean(axis=0, keepdims=True), PROB_FLOOR))
    y_all = ad.concat_cols(bundle.posteriors)

    joint = ad.scale(ad.matmul(ad.transpose(y_all), Tensor(codes)), 1.0 / m)
    conditional = ad.sum_all(ad.mul(joint, ad.sub(Tensor(log_pu), _safe_log(joint))))

    p_y = ad.batch_mean(y_all)
    neg_entropy = ad.sum_all(ad.mul(p_y, _safe_log(p_y)))
    # each view's marginal entropy appears once per codes view i
    return ad.scale(ad.add(conditional, ad.scale(neg_entropy, beta * V)), 1.0 / V**2)


def logit_penalty(logits: Tensor, alpha: float = DEFAULT_ALPHA, threshold: float = DEFAULT_LOGIT_THRESHOLD) -> Tensor:
    """``alpha/m * sum max(|logit| - threshold, 0)``."""
    if threshold <= 0:
        raise ParameterError(f"threshold must be positive, got {threshold}")
    m = logits.shape[0]
    excess = ad.relu(ad.add(ad.absolute(logits), -float(threshold)))
    return ad.scale(ad.sum_all(excess), alpha / m)


def total_loss(bundle: ViewBundle, beta: float = DEFAULT_BETA, alpha: float = DEFAULT_ALPHA,
               threshold: float = DEFAULT_LOGIT_THRESHOLD) -> LossReport:
    """Joint objective; the logit penalty is averaged over the bundle's views."""
    swap = swap_loss(bundle)
    cluster = mi_cluster_loss(bundle, beta)
    if bundle.logits:
        pen = logit_penalty(bundle.logits[0], alpha, threshold)
        for lg in bundle.logits[1:]:
            pen = pen + logit_penalty(lg, alpha, threshold)
        pen = ad.scale(pen, 1.0 / len(bundle.logits))
    else:
        pen = Tensor(0.0)
    total = swap + cluster + pen
    s, c, p = swap.item(), cluster.item(), pen.item()
    return LossReport(s, c, p, s + c + p, tensor=total)


def jsd(p, q, atol: float = 1e-9) -> float:
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise DimensionError(f"jsd: shapes {p.shape} and {q.shape} differ")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > atol:
            raise ParameterError(f"jsd: {name} is not a probability vector (sum={d.sum()})")
    mid = 0.5 * (p + q)
    return 0.5 * _kl(p, mid) + 0.5 * _kl(q, mid)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def jsd_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise JSD between the rows of ``a`` and the rows of ``b``."""
    out = np.empty((a.shape[0], b.shape[0]))
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            out[i, j] = jsd(p, q)
    return out
