"""scikit-learn front ends for the three training regimes.

Silo membership is passed as ``groups`` (one silo id per row), the same way
group-aware splitters receive it::

    clf = FADLClassifier(hidden_layer_sizes=(72, 14))
    clf.fit(X, y, groups=hospital)
    proba = clf.predict_proba(X_new, groups=hospital_new)[:, 1]

Every row given to ``fit`` is training data; splitting is the caller's job.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import SiloDataset
from .fadl import FadlConfig, SpecializedEnsemble, predict_routed, run_fadl
from .federated import FedConfig, run_federated
from .isolation import IsolationAudit
from .nn import Model, init_model, predict_proba as _forward_proba
from .training import TrainSpec, derive_seed, pooled_key, train


def _silos_from_groups(X, y, groups):
    groups = np.asarray(groups).astype(str)
    if groups.shape != (X.shape[0],):
        raise ValueError("groups must give one silo id per row")
    return [SiloDataset(g, X[groups == g], y[groups == g]) for g in np.unique(groups)]


class _BaseSiloClassifier(ClassifierMixin, BaseEstimator):

    def __init__(self, hidden_layer_sizes=(500, 100), learning_rate=0.01,
                 batch_size=100, l2=0.01, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.l2 = l2
        self.random_state = random_state

    def _validate_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) > 2:
            raise ValueError("only binary targets are supported")
        self.n_features_in_ = X.shape[1]
        y01 = (y == self.classes_[-1]).astype(np.int8)
        if not np.isin(X, (0.0, 1.0)).all():
            raise ValueError("features must be binary 0/1 indicators")
        return X, y01

    def _init(self) -> Model:
        seed = 0 if self.random_state is None else int(self.random_state)
        dims = [self.n_features_in_] + list(self.hidden_layer_sizes) + [1]
        return init_model(dims, seed)

    def _check_X(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _positive_proba(self, X, groups=None):
        raise NotImplementedError

    def predict_proba(self, X, groups=None):
        p = self._positive_proba(self._check_X(X), groups)
        return np.column_stack([1.0 - p, p])

    def predict(self, X, groups=None):
        p = self.predict_proba(X, groups)[:, 1]
        if len(self.classes_) == 1:
            return np.full(p.shape, self.classes_[0])
        return self.classes_[(p >= 0.5).astype(int)]

    def decision_function(self, X, groups=None):
        return self.predict_proba(X, groups)[:, 1]


class CentralizedClassifier(_BaseSiloClassifier):
    """Pools all silos and trains one network; the upper-bound baseline."""

    def __init__(self, hidden_layer_sizes=(500, 100), epochs=30, learning_rate=0.01,
                 batch_size=100, l2=0.01, random_state=0):
        super().__init__(hidden_layer_sizes, learning_rate, batch_size, l2, random_state)
        self.epochs = epochs

    def fit(self, X, y, groups=None):
        X, y01 = self._validate_fit(X, y)
        if groups is not None:
            # same canonical order as train_centralized
            groups = np.asarray(groups).astype(str)
            order = np.argsort(groups, kind="stable")
            X, y01, key = X[order], y01[order], pooled_key(np.unique(groups))
        else:
            key = "pooled"
        seed = 0 if self.random_state is None else int(self.random_state)
        spec = TrainSpec(epochs=self.epochs, batch_size=self.batch_size,
                         learning_rate=self.learning_rate, lam=self.l2,
                         shuffle_seed=derive_seed(seed, key))
        self.model_ = train(self._init(), X, y01, spec)
        return self

    def _positive_proba(self, X, groups=None):
        return _forward_proba(self.model_, X)


class FedAvgClassifier(_BaseSiloClassifier):
    """Federated averaging over the silos named by ``groups``."""

    def __init__(self, hidden_layer_sizes=(500, 100), global_cycles=20, local_epochs=5,
                 learning_rate=0.01, batch_size=100, l2=0.01, random_state=0, n_jobs=1):
        super().__init__(hidden_layer_sizes, learning_rate, batch_size, l2, random_state)
        self.global_cycles = global_cycles
        self.local_epochs = local_epochs
        self.n_jobs = n_jobs

    def fit(self, X, y, groups):
        X, y01 = self._validate_fit(X, y)
        silos = _silos_from_groups(X, y01, groups)
        config = FedConfig(self.global_cycles, self.local_epochs, self.learning_rate,
                           self.batch_size, self.l2,
                           0 if self.random_state is None else int(self.random_state),
                           n_jobs=self.n_jobs or 1)
        audit = IsolationAudit()
        self.model_, self.trace_ = run_federated(silos, self._init(), config, audit)
        return self

    def _positive_proba(self, X, groups=None):
        return _forward_proba(self.model_, X)


class FADLClassifier(_BaseSiloClassifier):
    """Federated first stage, then per-silo heads on a frozen first layer.

    ``predict_proba`` needs ``groups`` to route each row to its silo's
    model. Rows from silos not seen in ``fit`` raise unless
    ``fallback=True``, which scores them with the shared stage-one model.
    """

    def __init__(self, hidden_layer_sizes=(500, 100), stage1_cycles=10,
                 stage1_local_epochs=5, stage2_epochs=50, learning_rate=0.01,
                 batch_size=100, l2=0.01, random_state=0, fallback=False, n_jobs=1):
        super().__init__(hidden_layer_sizes, learning_rate, batch_size, l2, random_state)
        self.stage1_cycles = stage1_cycles
        self.stage1_local_epochs = stage1_local_epochs
        self.stage2_epochs = stage2_epochs
        self.fallback = fallback
        self.n_jobs = n_jobs

    def fit(self, X, y, groups):
        X, y01 = self._validate_fit(X, y)
        silos = _silos_from_groups(X, y01, groups)
        config = FadlConfig(self.stage1_cycles, self.stage1_local_epochs,
                            self.stage2_epochs, self.learning_rate, self.batch_size,
                            self.l2, 0 if self.random_state is None else int(self.random_state),
                            n_jobs=self.n_jobs or 1)
        self.ensemble_: SpecializedEnsemble = run_fadl(silos, self._init(), config)
        return self

    def _positive_proba(self, X, groups=None):
        if groups is None:
            raise ValueError("FADLClassifier needs groups to route rows to silo models")
        groups = np.asarray(groups).astype(str)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must give one silo id per row")
        p = np.empty(X.shape[0])
        for g in np.unique(groups):
            m = groups == g
            p[m] = predict_routed(self.ensemble_, g, X[m], fallback=self.fallback)
        return p
