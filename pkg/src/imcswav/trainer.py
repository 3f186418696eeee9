"""Joint training loop: views -> codes -> Sinkhorn targets -> losses -> update."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSpec, ViewConfig, batches, gen_synthetic, load_dataset, make_views, train_val_split
from .errors import ConfigError, IMCError, NumericalError
from .metrics import ari, clustering_accuracy, nmi
from .network import (AdamState, LrSchedule, Model, adam_step, classifier_forward, digest, load_checkpoint,
                      lr_at, normalize_prototypes, project_embed, save_checkpoint)
from .objectives import LossReport, ViewBundle, jsd_matrix, total_loss
from .selflabel import Codes, Targets, cosine_scores, sinkhorn_targets

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # data
    n: int = 2000
    input_dim: int = 32
    k_true: int = 4
    separation: float = 10.0
    noise_std: float = 1.0
    dataset_path: str | None = None
    val_fraction: float = 0.2
    # views
    n_high: int = 2
    n_low: int = 4
    high_keep_fraction: float = 0.75
    low_keep_fraction: float = 0.35
    jitter_std: float | None = None  # None -> 0.1 * noise_std
    mask_prob: float = 0.1
    # network
    hidden: Sequence[int] = (256, 256)
    embedding_dim: int = 128
    projection_dim: int = 32
    classifier_hidden: int = 256
    n_clusters: int | None = None  # None -> k_true
    n_prototypes: int = 64
    # self-labelling and objective
    temperature: float = 0.1
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    beta: float = 4.0
    alpha: float = 1e-2
    logit_threshold: float = 5.0
    # optimisation
    lr: float = 5e-4
    warmup_iters: int = 100
    decay_milestones: Sequence[float] = (0.3, 0.6, 0.8)
    decay_factor: float = 0.4
    weight_decay: float = 1e-5
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    # bookkeeping
    eval_every: int = 10
    output_dir: str | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.decay_milestones = tuple(float(f) for f in self.decay_milestones)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.clusters < 2:
            raise ConfigError(f"need at least 2 clusters, got {self.clusters}")
        if self.n_prototypes < self.clusters:
            raise ConfigError(f"n_prototypes ({self.n_prototypes}) must be >= clusters ({self.clusters})")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    @property
    def clusters(self) -> int:
        return self.k_true if self.n_clusters is None else self.n_clusters

    @property
    def view_config(self) -> ViewConfig:
        jitter = 0.1 * self.noise_std if self.jitter_std is None else self.jitter_std
        return ViewConfig(self.n_high, self.n_low, self.high_keep_fraction, self.low_keep_fraction,
                          jitter, self.mask_prob)

    @property
    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.n, self.input_dim, self.k_true, self.separation, self.noise_std, self.seed)

    @property
    def schedule(self) -> LrSchedule:
        decay = tuple(int(round(f * self.epochs)) for f in self.decay_milestones)
        return LrSchedule(self.lr, self.warmup_iters, decay, self.decay_factor)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["decay_milestones"] = list(self.decay_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        """Hash of every field that influences the trained parameters."""
        d = self.to_dict()
        for key in ("output_dir", "eval_every", "dataset_path"):
            d.pop(key)
        return digest(json.dumps(d, sort_keys=True))


@dataclass
class EpochRecord:
    epoch: int
    swap_loss: float
    cluster_loss: float
    penalty: float
    total: float
    lr: float
    acc: float
    nmi: float
    ari: float
    jsd_same: float
    jsd_cross: float
    wall_ms: float


@dataclass
class FrozenInputs:
    """Stop-gradient inputs pinned to fixed values.

    Lets a finite-difference check perturb parameters without the detached
    quantities (targets, classifier input, codes seen by the clustering
    loss) moving with them.
    """

    targets: list[np.ndarray]
    classifier_input: np.ndarray
    cluster_codes: list[np.ndarray]


def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def forward_views(views: Sequence[np.ndarray], model: Model, config: TrainConfig,
                  frozen: FrozenInputs | None = None) -> ViewBundle:
    """Encode stacked views and assemble per-view codes, targets and posteriors."""
    m = views[0].shape[0]
    x = Tensor(np.concatenate(views, axis=0))
    z = model.encoder(x)
    feats = project_embed(z, model.projection)
    scores = cosine_scores(feats, model.prototypes)
    u = ad.softmax_rows(scores, config.temperature)
    clf_in = z if frozen is None else Tensor(frozen.classifier_input)
    logits, post = classifier_forward(clf_in, model.classifier)

    codes, posteriors, logit_list, targets = [], [], [], []
    for v in range(len(views)):
        lo, hi = v * m, (v + 1) * m
        codes.append(Codes(ad.row_slice(u, lo, hi), scores.data[lo:hi], v))
        posteriors.append(ad.row_slice(post, lo, hi))
        logit_list.append(ad.row_slice(logits, lo, hi))
    for t in range(config.n_high):
        if frozen is None:
            targets.append(sinkhorn_targets(codes[t].scores, config.epsilon, config.sinkhorn_iters, t))
        else:
            targets.append(Targets(frozen.targets[t], config.epsilon, config.sinkhorn_iters, t))
    bundle = ViewBundle(codes, targets, posteriors, logit_list)
    if frozen is not None:
        bundle.cluster_codes = frozen.cluster_codes
    return bundle


def freeze(views: Sequence[np.ndarray], model: Model, config: TrainConfig) -> FrozenInputs:
    """Capture the stop-gradient inputs of :func:`forward_views` at the current parameters."""
    with ad.no_grad():
        bundle = forward_views(views, model, config)
        z = model.encoder(Tensor(np.concatenate(views, axis=0))).data
    return FrozenInputs([t.q.copy() for t in bundle.targets], z, [c.u.data.copy() for c in bundle.codes])


def framework_step(rows: np.ndarray, sample_ids: np.ndarray, model: Model, config: TrainConfig,
                   view_seed: int) -> tuple[ViewBundle, LossReport]:
    """One minibatch forward pass: build views, then evaluate the joint objective."""
    vs = make_views(rows, config.view_config, view_seed, sample_ids)
    bundle = forward_views(vs.views, model, config)
    report = total_loss(bundle, config.beta, config.alpha, config.logit_threshold)
    return bundle, report


class Trainer:
    """Owns the parameters and optimiser state of one training run.

    Only features are ever handed to a Trainer; labels stay outside.
    """

    def __init__(self, config: TrainConfig, features: np.ndarray, model: Model | None = None,
                 state: AdamState | None = None):
        self.config = config
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {self.features.shape}")
        if model is None:
            model = Model.init(self.features.shape[1], config.clusters, config.n_prototypes, config.hidden,
                               config.embedding_dim, config.projection_dim, config.classifier_hidden,
                               rng=np.random.default_rng(_seed_int(config.seed, 1)))
        elif model.input_dim != self.features.shape[1]:
            raise ConfigError(f"model expects {model.input_dim} features, data has {self.features.shape[1]}")
        self.model = model
        self.state = state if state is not None else AdamState()
        self.schedule = config.schedule
        self.epoch = 0
        self.batch_index = 0
        self.iteration = 0
        self._order: list[np.ndarray] | None = None

    @property
    def batches_per_epoch(self) -> int:
        return self.features.shape[0] // self.config.batch_size

    def _epoch_batches(self) -> list[np.ndarray]:
        if self._order is None:
            n = self.features.shape[0]
            self._order = list(batches(n, self.config.batch_size, _seed_int(self.config.seed, 2, self.epoch)))
        return self._order

    def step(self) -> LossReport:
        idx = self._epoch_batches()[self.batch_index]
        params = self.model.named_parameters()
        ad.zero_grad(params.values())
        _, report = framework_step(self.features[idx], idx, self.model, self.config,
                                   _seed_int(self.config.seed, 3, self.epoch))
        if not np.isfinite(report.total):
            raise NumericalError(f"non-finite loss at epoch {self.epoch}, batch {self.batch_index}")
        ad.backward(report.tensor)
        lr = lr_at(self.iteration, self.epoch, self.schedule)
        adam_step(params, None, self.state, lr, self.config.weight_decay, no_decay=("prototypes",))
        normalize_prototypes(self.model.prototypes)
        report.tensor = None
        self.iteration += 1
        self.batch_index += 1
        if self.batch_index == self.batches_per_epoch:
            self.epoch += 1
            self.batch_index = 0
            self._order = None
        return report

    def run_epoch(self) -> list[LossReport]:
        start = self.epoch
        reports = []
        while self.epoch == start:
            reports.append(self.step())
        return reports

    @property
    def current_lr(self) -> float:
        return lr_at(self.iteration, self.epoch, self.schedule)

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.state, self.config.digest(), {
            "epoch": self.epoch, "batch_index": self.batch_index, "iteration": self.iteration,
            "seed": self.config.seed,
        })

    @classmethod
    def resume(cls, path, config: TrainConfig, features: np.ndarray) -> Trainer:
        ckpt = load_checkpoint(path, expected_hash=config.digest())
        trainer = cls(config, features, ckpt.model, ckpt.state)
        trainer.epoch = int(ckpt.counters["epoch"])
        trainer.batch_index = int(ckpt.counters["batch_index"])
        trainer.iteration = int(ckpt.counters["iteration"])
        return trainer


def predict_proba(model: Model, features: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        z = model.encoder(Tensor(features))
        _, post = classifier_forward(z, model.classifier)
    return post.data


def embed(model: Model, features: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model.encoder(Tensor(features)).data


def view_codes(model: Model, views: Sequence[np.ndarray], temperature: float) -> list[np.ndarray]:
    with ad.no_grad():
        out = []
        for x in views:
            feats = project_embed(model.encoder(Tensor(x)), model.projection)
            out.append(ad.softmax_rows(cosine_scores(feats, model.prototypes), temperature).data)
    return out


def jsd_diagnostic(model: Model, features: np.ndarray, view_config: ViewConfig, temperature: float,
                   seed: int, n_pairs: int = 32) -> tuple[float, float]:
    """Mean JSD between codes of two views of the same rows (diagonal) and of different rows."""
    rows = features[:n_pairs]
    two = dataclasses.replace(view_config, n_high=2, n_low=0)
    vs = make_views(rows, two, seed)
    u1, u2 = view_codes(model, vs.views, temperature)
    u1 /= u1.sum(axis=1, keepdims=True)
    u2 /= u2.sum(axis=1, keepdims=True)
    mat = jsd_matrix(u1, u2)
    diag = np.diag(mat)
    off = mat[~np.eye(len(rows), dtype=bool)]
    return float(diag.mean()), float(off.mean()) if off.size else float("nan")


def evaluate(model: Model, features: np.ndarray, labels: np.ndarray, config: TrainConfig | None = None,
             seed: int = 0) -> dict[str, float]:
    """Cluster raw (untransformed) inputs with the classifier and score against labels."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise ConfigError(f"model expects {model.input_dim} input features, got shape {features.shape}")
    config = config if config is not None else TrainConfig(input_dim=model.input_dim, k_true=model.n_clusters)
    pred = predict_proba(model, features).argmax(axis=1)
    same, cross = jsd_diagnostic(model, features, config.view_config, config.temperature, _seed_int(seed, 4))
    return {
        "acc": clustering_accuracy(pred, labels),
        "nmi": nmi(pred, labels),
        "ari": ari(pred, labels),
        "jsd_same": same,
        "jsd_cross": cross,
        "n": int(features.shape[0]),
    }


@dataclass
class TrainResult:
    model: Model
    records: list[EpochRecord]
    val_metrics: dict[str, float]
    checkpoint: Path | None = None
    trainer: Trainer | None = field(default=None, repr=False)


class TrainingError(IMCError, RuntimeError):
    pass


def load_data(config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if config.dataset_path:
        return load_dataset(config.dataset_path)
    return gen_synthetic(config.dataset_spec)


def _write_atomic(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def train(config: TrainConfig, features: np.ndarray | None = None, labels: np.ndarray | None = None) -> TrainResult:
    """Train on an 80/20 split, evaluating on the held-out part every ``eval_every`` epochs."""
    if features is None:
        features, labels = load_data(config)
    train_idx, val_idx = train_val_split(features.shape[0], config.seed, config.val_fraction)
    trainer = Trainer(config, features[train_idx])
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        for name in ("metrics.jsonl", "summary.csv"):
            (out_dir / name).unlink(missing_ok=True)
    ckpt_path = out_dir / "checkpoint.imcs" if out_dir is not None else None

    records: list[EpochRecord] = []
    val_metrics: dict[str, float] = {}
    while trainer.epoch < config.epochs:
        epoch = trainer.epoch
        t0 = time.perf_counter()
        try:
            reports = trainer.run_epoch()
        except (NumericalError, FloatingPointError) as exc:
            raise TrainingError(f"training failed in epoch {epoch}, batch {trainer.batch_index}: {exc}"
                                + (f"; last checkpoint kept at {ckpt_path}" if ckpt_path else "")) from exc
        last = trainer.epoch == config.epochs
        if not (last or trainer.epoch % config.eval_every == 0):
            continue
        if labels is not None:
            val_metrics = evaluate(trainer.model, features[val_idx], labels[val_idx], config, config.seed)
        swap = float(np.mean([r.swap_loss for r in reports]))
        cluster = float(np.mean([r.cluster_loss for r in reports]))
        pen = float(np.mean([r.penalty for r in reports]))
        rec = EpochRecord(epoch + 1, swap, cluster, pen, swap + cluster + pen,
                          lr_at(trainer.iteration - 1, epoch, trainer.schedule),
                          val_metrics.get("acc", float("nan")), val_metrics.get("nmi", float("nan")),
                          val_metrics.get("ari", float("nan")), val_metrics.get("jsd_same", float("nan")),
                          val_metrics.get("jsd_cross", float("nan")), (time.perf_counter() - t0) * 1e3)
        records.append(rec)
        logger.info("epoch %d: loss %.4f acc %.4f", rec.epoch, rec.total, rec.acc)
        if out_dir is not None:
            _append_record(out_dir, rec)
            _write_atomic(ckpt_path, trainer.save)
    return TrainResult(trainer.model, records, val_metrics, ckpt_path, trainer)


def _append_record(out_dir: Path, rec: EpochRecord) -> None:
    row = dataclasses.asdict(rec)
    row["wall_ms"] = round(row["wall_ms"], 3)
    with open(out_dir / "metrics.jsonl", "a") as fh:
        fh.write(json.dumps(row) + "\n")
    csv_path = out_dir / "summary.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)
