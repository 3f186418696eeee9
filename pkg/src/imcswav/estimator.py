"""scikit-learn compatible front end."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import clustering_accuracy
from .trainer import TrainConfig, Trainer, embed, predict_proba


class IMCSwAV(ClusterMixin, TransformerMixin, BaseEstimator):
    """Deep clustering by swapped self-labelling plus a mutual-information classifier head.

    Parameters
    ----------
    n_clusters : int, default=4
        Width of the classifier output.
    n_prototypes : int, default=64
        Number of trainable prototype vectors (over-clustering size).
    temperature : float, default=0.1
        Softmax temperature of the prototype codes.
    epsilon : float, default=0.05
        Entropy weight of the Sinkhorn-Knopp assignment.
    sinkhorn_iters : int, default=3
    beta : float, default=4.0
        Weight of the marginal entropy in the clustering loss.
    alpha : float, default=0.01
        Weight of the logit magnitude penalty.
    logit_threshold : float, default=5.0
    hidden, embedding_dim, projection_dim, classifier_hidden
        Layer sizes of encoder, projection head and classifier.
    n_high, n_low : int
        Number of large-coverage and small-coverage views per sample.
    high_keep_fraction, low_keep_fraction, jitter_std, mask_prob
        View transform strengths.
    lr, warmup_iters, decay_milestones, decay_factor, weight_decay
        Adam schedule; milestones are fractions of ``epochs``.
    epochs, batch_size : int
    random_state : int, default=0

    Attributes
    ----------
    model_ : Model
        Trained parameters.
    labels_ : ndarray of shape (n_samples,)
        Cluster of each training sample.
    loss_history_ : list of float
        Mean total loss per epoch.
    """

    def __init__(self, n_clusters=4, n_prototypes=64, temperature=0.1, epsilon=0.05, sinkhorn_iters=3,
                 beta=4.0, alpha=1e-2, logit_threshold=5.0, hidden=(256, 256), embedding_dim=128,
                 projection_dim=32, classifier_hidden=256, n_high=2, n_low=4, high_keep_fraction=0.75,
                 low_keep_fraction=0.35, jitter_std=0.1, mask_prob=0.1, lr=5e-4, warmup_iters=100,
                 decay_milestones=(0.3, 0.6, 0.8), decay_factor=0.4, weight_decay=1e-5, epochs=60,
                 batch_size=64, random_state=0):
        self.n_clusters = n_clusters
        self.n_prototypes = n_prototypes
        self.temperature = temperature
        self.epsilon = epsilon
        self.sinkhorn_iters = sinkhorn_iters
        self.beta = beta
        self.alpha = alpha
        self.logit_threshold = logit_threshold
        self.hidden = hidden
        self.embedding_dim = embedding_dim
        self.projection_dim = projection_dim
        self.classifier_hidden = classifier_hidden
        self.n_high = n_high
        self.n_low = n_low
        self.high_keep_fraction = high_keep_fraction
        self.low_keep_fraction = low_keep_fraction
        self.jitter_std = jitter_std
        self.mask_prob = mask_prob
        self.lr = lr
        self.warmup_iters = warmup_iters
        self.decay_milestones = decay_milestones
        self.decay_factor = decay_factor
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, input_dim: int) -> TrainConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        k = params.pop("n_clusters")
        return TrainConfig(input_dim=input_dim, k_true=k, seed=0 if seed is None else int(seed), **params)

    def fit(self, X, y=None):
        """Train on ``X``; ``y`` is ignored."""
        X = check_array(X, dtype=np.float64)
        config = self._config(X.shape[1])
        if X.shape[0] < config.batch_size:
            raise ValueError(f"need at least batch_size={config.batch_size} samples, got {X.shape[0]}")
        trainer = Trainer(config, X)
        self.loss_history_ = []
        while trainer.epoch < config.epochs:
            reports = trainer.run_epoch()
            self.loss_history_.append(float(np.mean([r.total for r in reports])))
        self.model_ = trainer.model
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        return predict_proba(self.model_, X)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        """Encoder embedding of each row."""
        X = self._check(X)
        return embed(self.model_, X)

    def score(self, X, y) -> float:
        """Hungarian-matched accuracy against reference labels."""
        return clustering_accuracy(self.predict(X), y)
