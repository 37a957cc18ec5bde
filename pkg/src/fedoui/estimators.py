"""scikit-learn compatible wrappers.

:class:`BetaTypicalityScorer` exposes the round-wise Beta fit and bilateral
score as a transformer; :class:`FederatedCNNClassifier` runs a whole
federated simulation inside ``fit`` and predicts with the final global model.
Both inherit ``get_params``/``set_params`` from :class:`~sklearn.base.BaseEstimator`.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import as_float_array, as_label_array, check_unit_interval
from .aggregation import compute_weights
from .beta import DEGENERATE, beta_median, bilateral_score, fit_beta_moments
from .data import Dataset
from .harness import ExperimentConfig, run_experiment


def _column(X, name="X"):
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    return check_unit_interval(arr, name=name)


class BetaTypicalityScorer(TransformerMixin, BaseEstimator):
    """Fit ``Beta(alpha, beta)`` to OUI values and map values to typicality scores.

    After ``fit``: ``fit_`` is a :class:`~fedoui.beta.BetaParams` or
    ``DEGENERATE``; ``median_`` is the fitted median (``None`` if degenerate).
    A degenerate fit scores every value 1.
    """

    def fit(self, X, y=None):
        values = _column(X)
        self.fit_ = fit_beta_moments(values)
        self.degenerate_ = self.fit_ is DEGENERATE
        self.median_ = None if self.degenerate_ else beta_median(self.fit_)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "fit_")
        values = _column(X)
        if self.degenerate_:
            return np.ones(values.size)
        return np.array([bilateral_score(v, self.fit_) for v in values])


class ClientWeighter(BaseEstimator):
    """Stateless weighting rule: ``weights(reports)`` for one round."""

    def __init__(self, method="fedoui", eps=1e-3):
        self.method = method
        self.eps = eps

    def weights(self, reports):
        return compute_weights(self.method, reports, self.eps)[0]


class FederatedCNNClassifier(ClassifierMixin, BaseEstimator):
    """Federated training of the two-block CNN on ``(X, y)``.

    ``X`` is an ``N x C x H x W`` float array (already normalized), split
    across simulated clients according to ``partition``.  Per-round accuracy
    is measured on ``eval_set`` when given, otherwise on the training data.

    Fitted attributes: ``classes_``, ``spec_``, ``params_``, ``log_``.
    """

    def __init__(self, method="fedoui", n_clients=20, clients_per_round=5, rounds=60,
                 local_epochs=1, lr=0.01, momentum=0.9, batch_size=32, probe_batch_size=32,
                 eps=1e-3, fedprox_mu=0.01, partition="dirichlet", concentration=0.1,
                 noise="none", noisy_fraction=0.3, flip_prob=0.5, conv1_channels=32,
                 conv2_channels=64, hidden_units=128, random_state=0, n_jobs=1):
        self.method = method
        self.n_clients = n_clients
        self.clients_per_round = clients_per_round
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.probe_batch_size = probe_batch_size
        self.eps = eps
        self.fedprox_mu = fedprox_mu
        self.partition = partition
        self.concentration = concentration
        self.noise = noise
        self.noisy_fraction = noisy_fraction
        self.flip_prob = flip_prob
        self.conv1_channels = conv1_channels
        self.conv2_channels = conv2_channels
        self.hidden_units = hidden_units
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self, X, n_classes, n_eval):
        params = self.get_params()
        seed = params.pop("random_state")
        params.pop("n_jobs")
        return ExperimentConfig(dataset="memory", seed=int(seed), n_classes=n_classes,
                                channels=X.shape[1], image_side=X.shape[2],
                                train_subset=len(X), test_subset=max(n_eval, 1), **params)

    def fit(self, X, y, eval_set=None):
        X = as_float_array(X, ndim=4, name="X")
        if X.shape[2] != X.shape[3]:
            raise ValueError("images must be square")
        self.classes_, y_enc = np.unique(as_label_array(y), return_inverse=True)
        k = len(self.classes_)
        train = Dataset(y_enc, images=X, name="train", n_classes=k)
        if eval_set is not None:
            Xe = as_float_array(eval_set[0], ndim=4, name="eval X")
            ye = np.searchsorted(self.classes_, as_label_array(eval_set[1]))
            test = Dataset(ye, images=Xe, name="eval", n_classes=k)
        else:
            test = train
        config = self._config(X, k, len(test))
        self.log_ = run_experiment(config, n_jobs=self.n_jobs, datasets=(train, test))
        self.spec_ = self.log_.spec
        self.params_ = self.log_.final_params
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = as_float_array(X, ndim=4, name="X")
        return nn.predict_logits(self.spec_, self.params_, X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
