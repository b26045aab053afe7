"""scikit-learn style wrappers around the online selective samplers.

``fit`` replays ``(X, y)`` as a stream in row order: the sampler predicts each
row, and only looks at ``y[t]`` on rounds where it asks for the label.
``partial_fit`` continues the same stream.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_labels, check_unit_norm
from .learner import D_TEST_CONSTANT, AugmentedPoint, LearnerConfig, make_learner
from .model_selection import MetaConfig, MetaLearner, make_pool
from .network import TrainConfig


def _check_xy(X, y):
    X = check_unit_norm(X)
    y = check_binary_labels(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} labels")
    return X, y


class _StreamMixin:
    classes_ = np.array([-1, 1])

    def _record(self, action, query):
        self.actions_.append(int(action))
        self.queried_.append(bool(query))

    @property
    def n_queries_(self) -> int:
        check_is_fitted(self, "queried_")
        return int(np.sum(self.queried_))

    def predict(self, X):
        check_is_fitted(self, "queried_")
        X = check_unit_norm(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._predictor().predict(X)

    def decision_function(self, X):
        """U_plus - U_minus; positive values predict +1."""
        check_is_fitted(self, "queried_")
        U = self._predictor().decision_values(check_unit_norm(X))
        return U[:, 0] - U[:, 1]


class NTKSelectiveSampler(_StreamMixin, ClassifierMixin, BaseEstimator):
    """Single selective sampler over frozen or retrained NTK features.

    Parameters
    ----------
    S : complexity bound used in the confidence radius.
    delta : confidence level.
    variant : "frozen" or "nonfrozen".
    width, depth : network width m and depth n.
    horizon_T : stream length for the nonfrozen offset; defaults to len(X) on first fit.
    J, eta : gradient steps and step size of the nonfrozen retraining.
    always_query : ask for every label (passive reference).
    random_state : network seed.
    """

    def __init__(self, S=1.0, delta=0.05, variant="frozen", width=32, depth=2, horizon_T=None,
                 J=100, eta=None, always_query=False, random_state=0):
        self.S = S
        self.delta = delta
        self.variant = variant
        self.width = width
        self.depth = depth
        self.horizon_T = horizon_T
        self.J = J
        self.eta = eta
        self.always_query = always_query
        self.random_state = random_state

    def _init(self, X):
        T = self.horizon_T or X.shape[0]
        train = None
        if self.variant == "nonfrozen":
            train = (TrainConfig.default(self.width, self.depth, T, J=self.J) if self.eta is None
                     else TrainConfig(self.eta, self.J, self.width))
        cfg = LearnerConfig(S=self.S, delta=self.delta, variant=self.variant, horizon_T=T,
                            train=train, always_query=self.always_query)
        self.learner_ = make_learner(cfg, X.shape[1], self.width, self.depth, self.random_state)
        self.n_features_in_ = X.shape[1]
        self.actions_, self.queried_, self.trace_ = [], [], []

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._init(X)
        return self._consume(X, y)

    def partial_fit(self, X, y):
        X, y = _check_xy(X, y)
        if not hasattr(self, "learner_"):
            self._init(X)
        return self._consume(X, y)

    def _consume(self, X, y):
        for x, label in zip(X, y):
            point = AugmentedPoint.from_raw(x, check=False)
            dec = self.learner_.observe(point)
            self._record(dec.action, dec.query)
            if dec.query:
                self.learner_.update(point, dec, int(dec.action != label))
            self.trace_.append(self.learner_.trace_record(len(self.queried_), dec))
        return self

    def _predictor(self):
        return self.learner_.snapshot_classifier()


class ModelSelectionSampler(_StreamMixin, ClassifierMixin, BaseEstimator):
    """Regret-balancing meta-learner over a grid of (S, d) base samplers.

    ``predict`` uses the active learner with the largest sampling probability
    (smallest d, then smallest S).
    """

    def __init__(self, S_values=None, d_values=None, gamma_exp=1.0, delta=0.05, width=32, depth=2,
                 horizon_T=None, M_bound_hint=1, random_state=0):
        self.S_values = S_values
        self.d_values = d_values
        self.gamma_exp = gamma_exp
        self.delta = delta
        self.width = width
        self.depth = depth
        self.horizon_T = horizon_T
        self.M_bound_hint = M_bound_hint
        self.random_state = random_state

    def _init(self, X):
        T = max(self.horizon_T or X.shape[0], 2)
        pool = make_pool(T, self.M_bound_hint, self.delta, input_dim=X.shape[1], width=self.width,
                         depth=self.depth, seed=self.random_state, S_values=self.S_values,
                         d_values=self.d_values)
        cfg = MetaConfig(delta=self.delta, gamma_exp=self.gamma_exp, horizon_T=T,
                         d_constant=D_TEST_CONSTANT["frozen"])
        self.meta_ = MetaLearner(pool, cfg, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        self.actions_, self.queried_, self.trace_ = [], [], []

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        self._init(X)
        return self._consume(X, y)

    def partial_fit(self, X, y):
        X, y = _check_xy(X, y)
        if not hasattr(self, "meta_"):
            self._init(X)
        return self._consume(X, y)

    def _consume(self, X, y):
        for x, label in zip(X, y):
            rnd = self.meta_.step(AugmentedPoint(x), lambda: int(label))
            self._record(rnd.action, rnd.query)
            self.trace_.append(rnd.to_record())
        return self

    @property
    def survivors_(self) -> list[int]:
        check_is_fitted(self, "meta_")
        return list(self.meta_.state.active)

    def _predictor(self):
        st = self.meta_.state
        best = min(st.active, key=lambda i: (st.d[i], st.S[i]))
        return self.meta_.pool[best].learner.snapshot_classifier()
