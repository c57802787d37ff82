"""Estimator-style wrappers so the back-ends compose with scikit-learn
pipelines: fit on an (X, speaker-labels) pair, then score verification
trials. The functional core stays importable on its own; these classes
only add the fit/transform/get_params surface and input validation.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import baselines, trainer
from .attention import BackendConfig, backend_forward
from .data import EmbeddingSet


def _check_embeddings(X, y):
    X, y = check_X_y(X, y, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X, np.asarray([str(v) for v in y], dtype=object)


class LinearDiscriminantProjection(TransformerMixin, BaseEstimator):
    """Supervised projection maximizing between- over within-speaker scatter.

    The fitted projection whitens the within-speaker scatter, so projected
    features have identity within-class covariance.
    """

    def __init__(self, n_components=400):
        self.n_components = n_components

    def fit(self, X, y):
        X, y = _check_embeddings(X, y)
        proj = baselines.lda_fit(X, y, self.n_components)
        self.projection_ = proj.projection
        self.mean_ = proj.mean
        self.eigenvalues_ = proj.eigenvalues
        return self

    def transform(self, X):
        check_is_fitted(self, "projection_")
        X = check_array(X, dtype=np.float64)
        proj = baselines.LdaProjection(self.projection_, self.mean_, self.eigenvalues_)
        return baselines.lda_apply(proj, X)


class CosineBackend(BaseEstimator):
    """Stateless cosine scorer with mean multi-enrollment handling."""

    def __init__(self, aggregation="mean"):
        self.aggregation = aggregation

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def score_trial(self, enroll, test) -> float:
        rep = baselines.aggregate_enrollment(np.atleast_2d(np.asarray(enroll, dtype=np.float64)),
                                             self.aggregation)
        return baselines.cosine_score(rep, test)


class PldaBackend(BaseEstimator):
    """Gaussian PLDA scorer fitted by EM, optionally behind an LDA projection."""

    def __init__(self, latent_dim=150, n_iter=10, lda_components=None, length_norm=False):
        self.latent_dim = latent_dim
        self.n_iter = n_iter
        self.lda_components = lda_components
        self.length_norm = length_norm

    def fit(self, X, y):
        X, y = _check_embeddings(X, y)
        self.lda_ = None
        if self.lda_components is not None:
            self.lda_ = baselines.lda_fit(X, y, self.lda_components)
            X = baselines.lda_apply(self.lda_, X)
        if self.length_norm:
            X = baselines.length_normalize(X)
        self.model_ = baselines.plda_fit(X, y, self.latent_dim, self.n_iter)
        self.loglik_path_ = list(self.model_.loglik_path)
        return self

    def _project(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.lda_ is not None:
            x = baselines.lda_apply(self.lda_, x)
        if self.length_norm:
            x = baselines.length_normalize(x)
        return x

    def score_pair(self, e_i, e_j) -> float:
        check_is_fitted(self, "model_")
        return baselines.plda_score(self.model_, self._project(e_i), self._project(e_j))

    def score_trial(self, enroll, test, mode="mean") -> float:
        check_is_fitted(self, "model_")
        enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
        return baselines.plda_score_multi(
            self.model_, self._project(enroll), self._project(test), mode)


class AttentionBackend(BaseEstimator):
    """Trainable attention back-end over multi-enrollment trials.

    fit(X, y) expects one embedding per row with speaker labels in y; it
    groups rows by speaker and runs the balanced-batch SGD loop. Scores are
    probabilities of the test embedding matching the enrollment set.
    """

    def __init__(self, sdsa_heads=4, ffsa_heads=4, ffsa_hidden=64,
                 batch_speakers=256, batch_utts=5, loss_weight=0.6,
                 lr_min=1e-5, lr_max=3e-5, half_cycle=2000,
                 epochs=40, seed=0):
        self.sdsa_heads = sdsa_heads
        self.ffsa_heads = ffsa_heads
        self.ffsa_hidden = ffsa_hidden
        self.batch_speakers = batch_speakers
        self.batch_utts = batch_utts
        self.loss_weight = loss_weight
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.half_cycle = half_cycle
        self.epochs = epochs
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_embeddings(X, y)
        pool = EmbeddingSet.from_arrays(X, y)
        config = BackendConfig(dim=X.shape[1], sdsa_heads=self.sdsa_heads,
                               ffsa_heads=self.ffsa_heads, ffsa_hidden=self.ffsa_hidden)
        spec = trainer.BatchSpec(self.batch_speakers, self.batch_utts, self.seed)
        schedule = trainer.CyclicalLrSchedule(self.lr_min, self.lr_max, self.half_cycle)
        self.state_ = trainer.train(pool, config, spec, schedule,
                                    loss_weight=self.loss_weight, epochs=self.epochs)
        self.config_ = config
        self.params_ = self.state_.params
        self.history_ = list(self.state_.history)
        return self

    def score_trial(self, enroll, test) -> float:
        check_is_fitted(self, "params_")
        enroll = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
        P, _ = backend_forward(enroll, test, self.params_, self.config_)
        return P
