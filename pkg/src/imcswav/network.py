"""Encoder, projection head, prototypes, classifier, Adam and checkpoints."""

from __future__ import annotations

import bisect
import hashlib
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ContainerError, DegenerateRowError, DimensionError, ParameterError


UNIT_TOL = 4 * np.finfo(np.float64).eps


class MLP:
    """Fully connected stack with rectifier activations between layers.

    The last layer is linear. Weights are stored input-major, ``(d_in, d_out)``,
    so a forward pass is ``x @ W + b``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None):
        if len(sizes) < 2:
            raise ParameterError(f"an MLP needs at least input and output sizes, got {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for d_in, d_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(d_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, (1, d_out)), requires_grad=True))

    @classmethod
    def from_arrays(cls, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> MLP:
        net = cls.__new__(cls)
        net.weights = [Tensor(w, requires_grad=True) for w in weights]
        net.biases = [Tensor(np.reshape(b, (1, -1)), requires_grad=True) for b in biases]
        net.sizes = (net.weights[0].shape[0],) + tuple(w.shape[1] for w in net.weights)
        for w, w_next in zip(net.weights[:-1], net.weights[1:]):
            if w.shape[1] != w_next.shape[0]:
                raise DimensionError(f"layer shapes do not chain: {w.shape} -> {w_next.shape}")
        return net

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.sizes[0]:
            raise DimensionError(f"input width {x.shape[1]} != expected {self.sizes[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.{i}.weight", w))
            out.append((f"{prefix}.{i}.bias", b))
        return out


@dataclass
class Model:
    encoder: MLP
    projection: MLP
    prototypes: Tensor
    classifier: MLP

    @classmethod
    def init(cls, input_dim: int, n_clusters: int, n_prototypes: int, hidden: Sequence[int] = (256, 256),
             embedding_dim: int = 128, projection_dim: int = 32, classifier_hidden: int = 256,
             rng: np.random.Generator | None = None) -> Model:
        rng = rng if rng is not None else np.random.default_rng(0)
        encoder = MLP([input_dim, *hidden, embedding_dim], rng)
        projection = MLP([embedding_dim, projection_dim], rng)
        protos = Tensor(rng.standard_normal((n_prototypes, projection_dim)), requires_grad=True)
        normalize_prototypes(protos)
        classifier = MLP([embedding_dim, classifier_hidden, classifier_hidden, n_clusters], rng)
        return cls(encoder, projection, protos, classifier)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.encoder.named_parameters("encoder"))
        out.update(self.projection.named_parameters("projection"))
        out["prototypes"] = self.prototypes
        out.update(self.classifier.named_parameters("classifier"))
        return out

    @property
    def n_clusters(self) -> int:
        return self.classifier.sizes[-1]

    @property
    def input_dim(self) -> int:
        return self.encoder.sizes[0]

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> Model:
        def _mlp(prefix):
            pat = re.compile(rf"^{prefix}\.(\d+)\.weight$")
            idx = sorted(int(m.group(1)) for k in arrays if (m := pat.match(k)))
            if not idx:
                raise ContainerError(f"no layers named {prefix}.* in checkpoint")
            return MLP.from_arrays([arrays[f"{prefix}.{i}.weight"] for i in idx],
                                   [arrays[f"{prefix}.{i}.bias"] for i in idx])

        return cls(_mlp("encoder"), _mlp("projection"), Tensor(arrays["prototypes"], requires_grad=True),
                   _mlp("classifier"))


def encoder_forward(x: Tensor, encoder: MLP) -> Tensor:
    return encoder(x)


def project_embed(z: Tensor, projection: MLP) -> Tensor:
    """Linear projection followed by row-wise l2 normalisation."""
    return ad.l2_normalize_rows(projection(z))


def classifier_forward(z: Tensor, classifier: MLP) -> tuple[Tensor, Tensor]:
    """Logits and softmax posterior. The embedding is detached first."""
    logits = classifier(ad.detach(z))
    return logits, ad.softmax_rows(logits, 1.0)


def normalize_prototypes(c: Tensor) -> None:
    """Rescale each prototype row to unit length, in place."""
    norms = np.sqrt((c.data * c.data).sum(axis=1, keepdims=True))
    if np.any(norms < ad.NORM_FLOOR):
        raise DegenerateRowError("a prototype row collapsed to zero")
    # rows already unit up to rounding are left untouched so the operation is idempotent
    norms[np.abs(norms - 1.0) <= UNIT_TOL] = 1.0
    c.data /= norms


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None] | None, state: AdamState,
              lr: float, weight_decay: float = 0.0, no_decay: Sequence[str] = ()) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient
    counts as zero.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if weight_decay and name not in no_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LrSchedule:
    base_lr: float = 5e-4
    warmup_iters: int = 100
    decay_epochs: Sequence[int] = (150, 300, 400)
    decay_factor: float = 0.4


def lr_at(iteration: int, epoch: int, s: LrSchedule) -> float:
    """Linear warmup over the first ``warmup_iters`` iterations, then step decay by epoch."""
    if iteration < s.warmup_iters:
        return s.base_lr * (iteration + 1) / s.warmup_iters
    passed = bisect.bisect_right(sorted(s.decay_epochs), epoch)
    return s.base_lr * s.decay_factor ** passed


def config_hash_array(digest_hex: str) -> np.ndarray:
    """Pack a sha256 hex digest into eight exactly-representable floats."""
    return np.array([int(digest_hex[i:i + 8], 16) for i in range(0, 64, 8)], dtype=np.float64)


def config_hash_hex(arr: np.ndarray) -> str:
    return "".join(f"{int(x):08x}" for x in arr)


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(path, model: Model, state: AdamState, config_hash: str,
                    counters: Mapping[str, float] | None = None) -> None:
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    arrays["meta/config_hash"] = config_hash_array(config_hash)
    arrays["meta/adam"] = np.array([state.step, state.beta1, state.beta2, state.eps], dtype=np.float64)
    for key, value in (counters or {}).items():
        arrays[f"meta/{key}"] = np.array([value], dtype=np.float64)
    for name, p in model.named_parameters().items():
        arrays[name] = p.data
    for name in state.m:
        arrays[f"adam.m/{name}"] = state.m[name]
        arrays[f"adam.v/{name}"] = state.v[name]
    container.save(path, arrays)


@dataclass
class Checkpoint:
    model: Model
    state: AdamState
    config_hash: str
    counters: dict[str, float]


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    arrays = container.load(path)
    if "meta/config_hash" not in arrays or "meta/adam" not in arrays:
        raise ContainerError("not a checkpoint: missing meta arrays")
    found = config_hash_hex(arrays["meta/config_hash"])
    if expected_hash is not None and found != expected_hash:
        raise ContainerError(f"config hash mismatch: checkpoint {found[:12]}..., expected {expected_hash[:12]}...")
    step, b1, b2, eps = arrays["meta/adam"]
    state = AdamState(step=int(step), beta1=float(b1), beta2=float(b2), eps=float(eps))
    params = {}
    counters = {}
    for name, arr in arrays.items():
        if name.startswith("adam.m/"):
            state.m[name[7:]] = arr.copy()
        elif name.startswith("adam.v/"):
            state.v[name[7:]] = arr.copy()
        elif name.startswith("meta/"):
            if name not in ("meta/config_hash", "meta/adam"):
                counters[name[5:]] = float(arr[0])
        else:
            params[name] = arr
    return Checkpoint(Model.from_arrays(params), state, found, counters)
