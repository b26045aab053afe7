"""Selective-sampling base learners over NTK gradient features.

Each round a learner scores the two action embeddings ``(x, 0)`` and
``(0, x)`` with an optimistic index

    U_a = <phi(x_a), Z^-1 b> + gamma ||phi(x_a)||_{Z^-1}            (frozen)
    U_a = f(x_a; theta) + gamma ||phi_t(x_a)||_{Z^-1} + 1/sqrt(T)     (nonfrozen)

predicts the larger one (ties go to +1), and asks for the label when the
optimistic margin |U_a - 1/2| falls within the threshold B. Only queried
rounds touch the state; Z^-1 and log det Z are maintained incrementally.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ._validation import augment, check_probability, check_unit_norm
from .network import (
    NetworkParams,
    TrainConfig,
    forward_batch,
    gradient_batch,
    init_network,
    train_nn,
)

# d-test multiplier in the model-selection learner, per base-learner variant
D_TEST_CONSTANT = {"frozen": 8.0, "nonfrozen": 432.0}


@dataclass(frozen=True)
class AugmentedPoint:
    raw: np.ndarray

    @classmethod
    def from_raw(cls, x, check: bool = True) -> "AugmentedPoint":
        x = np.asarray(x, dtype=float).ravel()
        if check:
            check_unit_norm(x[None, :], name="x")
        return cls(raw=x)

    @property
    def arms(self) -> np.ndarray:
        """Shape (2, 2d): row 0 is (x, 0), row 1 is (0, x)."""
        return augment(self.raw)[0]

    @property
    def plus(self) -> np.ndarray:
        return self.arms[0]

    @property
    def minus(self) -> np.ndarray:
        return self.arms[1]


@dataclass(frozen=True)
class LearnerConfig:
    S: float
    delta: float
    variant: Literal["frozen", "nonfrozen"] = "frozen"
    horizon_T: int | None = None
    train: TrainConfig | None = None
    always_query: bool = False

    def __post_init__(self):
        if self.S < 0:
            raise ValueError(f"S must be >= 0, got {self.S}")
        check_probability(self.delta, "delta")
        if self.variant not in ("frozen", "nonfrozen"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "nonfrozen":
            if not self.horizon_T or self.horizon_T < 1:
                raise ValueError("the nonfrozen learner needs horizon_T >= 1")
            if self.train is None:
                raise ValueError("the nonfrozen learner needs a TrainConfig")

    def radius(self, logdet: float) -> float:
        if self.variant == "frozen":
            return math.sqrt(logdet + 2.0 * math.log(1.0 / self.delta)) + self.S
        return 3.0 * (math.sqrt(logdet + 3.0 * math.log(1.0 / self.delta)) + self.S)

    @property
    def offset(self) -> float:
        return 1.0 / math.sqrt(self.horizon_T) if self.variant == "nonfrozen" else 0.0


@dataclass
class LearnerState:
    """Ellipsoid statistics. ``Zinv is None`` stands for the identity (no queries yet)."""

    Zinv: np.ndarray | None
    logdetZ: float
    theta: np.ndarray
    gamma: float
    queries: int = 0
    b: np.ndarray | None = None
    w: np.ndarray | None = field(default=None, repr=False)  # Z^-1 b, frozen only
    contexts: list = field(default_factory=list, repr=False)
    losses: list = field(default_factory=list, repr=False)

    def Zinv_dense(self) -> np.ndarray:
        return np.eye(self.theta.size) if self.Zinv is None else self.Zinv


@dataclass(frozen=True)
class Decision:
    action: int
    query: bool
    U_plus: float
    U_minus: float
    B: float
    margin_hat: float
    sqnorm: float  # ||phi(x_{t,a_t})||^2 in the Z^-1 norm, before the update
    phi: np.ndarray = field(repr=False, compare=False)
    zinv_phi: np.ndarray = field(repr=False, compare=False)


def _quad_terms(Zinv: np.ndarray | None, phi: np.ndarray):
    """Return (Z^-1 phi_a rows, ||phi_a||^2_{Z^-1}) for both arms."""
    if Zinv is None:
        v = phi
    else:
        v = phi @ Zinv  # Zinv is symmetric
    sq = np.einsum("ij,ij->i", phi, v)
    return v, np.maximum(sq, 0.0)


class BaseLearner:
    """One frozen or nonfrozen selective sampler."""

    def __init__(self, config: LearnerConfig, net: NetworkParams):
        if (config.variant == "nonfrozen") != net.duplicate_input:
            raise ValueError("network initialization does not match the learner variant")
        self.config = config
        self.net0 = net.at_init()
        self.net = self.net0
        self.root_m = math.sqrt(net.width)
        self.state = self.initial_state()

    def initial_state(self) -> LearnerState:
        p = self.net0.param_count
        theta = self.net0.theta
        if self.config.variant == "frozen":
            return LearnerState(None, 0.0, theta, self.config.radius(0.0),
                                b=np.zeros(p), w=np.zeros(p))
        return LearnerState(None, 0.0, theta, self.config.radius(0.0))

    @property
    def param_count(self) -> int:
        return self.net0.param_count

    def features(self, point: AugmentedPoint) -> np.ndarray:
        """Feature rows for both arms (gradient / sqrt(m) at theta0 or current theta)."""
        return gradient_batch(point.arms, self.net) / self.root_m

    def observe(self, point: AugmentedPoint, phi: np.ndarray | None = None) -> Decision:
        """Score both arms and decide whether to query. Never mutates the state."""
        st, cfg = self.state, self.config
        if phi is None:
            phi = self.features(point)
        v, sq = _quad_terms(st.Zinv, phi)
        width = np.sqrt(sq)
        if cfg.variant == "frozen":
            mean = phi @ st.w
        else:
            mean = forward_batch(point.arms, self.net)
        U = mean + st.gamma * width + cfg.offset
        k = 0 if U[0] >= U[1] else 1
        B = 2.0 * st.gamma * width[k] + 2.0 * cfg.offset
        if cfg.always_query:
            B = math.inf
        margin_hat = float(U[k] - 0.5)
        return Decision(
            action=1 if k == 0 else -1,
            query=bool(abs(margin_hat) <= B),
            U_plus=float(U[0]), U_minus=float(U[1]), B=float(B),
            margin_hat=margin_hat, sqnorm=float(sq[k]),
            phi=phi[k], zinv_phi=v[k],
        )

    def update(self, point: AugmentedPoint, decision: Decision, loss: int) -> LearnerState:
        """Fold in a queried label; ``loss`` is 1{a_t != y_t}."""
        if not decision.query:
            raise ValueError("update called on an unqueried round")
        if loss not in (0, 1):
            raise ValueError("loss must be 0 or 1")
        st, cfg = self.state, self.config
        phi, v, s = decision.phi, decision.zinv_phi, decision.sqnorm
        denom = 1.0 + s
        if not np.isfinite(denom) or denom <= 0.0:
            raise FloatingPointError(f"rank-one update denominator {denom!r}: Z lost positive definiteness")
        if st.Zinv is None:
            st.Zinv = np.eye(phi.size)
        st.Zinv -= np.outer(v, v) / denom
        st.logdetZ += math.log1p(s)
        st.queries += 1
        if cfg.variant == "frozen":
            gain = 1.0 - loss
            phi_w = float(phi @ st.w)
            st.w = st.w - v * (phi_w / denom) + v * (gain / denom)
            st.b = st.b + gain * phi
            st.theta = self.net0.theta0 + st.w / self.root_m
        else:
            k = 0 if decision.action == 1 else 1
            st.contexts.append(point.arms[k])
            st.losses.append(int(loss))
            self.net = train_nn(cfg.train, st.contexts, st.losses, self.net0)
            st.theta = self.net.theta
        st.gamma = cfg.radius(st.logdetZ)
        return st

    def snapshot_classifier(self) -> "SnapshotClassifier":
        return SnapshotClassifier(copy.deepcopy(self.state), self.config, self.net, self.root_m)

    def trace_record(self, t: int, decision: Decision) -> dict:
        st = self.state
        return {
            "t": t, "action": decision.action, "query": decision.query,
            "U_plus": decision.U_plus, "U_minus": decision.U_minus, "B": decision.B,
            "margin_hat": decision.margin_hat, "sqnorm": decision.sqnorm,
            "logdetZ": st.logdetZ, "gamma": st.gamma, "queries": st.queries,
        }


class SnapshotClassifier:
    """Frozen copy of a learner's predictor x -> argmax_a U(x_a)."""

    def __init__(self, state: LearnerState, config: LearnerConfig, net: NetworkParams, root_m: float):
        self._state = state
        self._config = config
        self._net = net
        self._root_m = root_m

    def decision_values(self, X) -> np.ndarray:
        """(n, 2) array of optimistic indices (U_plus, U_minus)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = augment(X).reshape(-1, X.shape[1] * 2)
        phi = gradient_batch(A, self._net) / self._root_m
        st = self._state
        v = phi if st.Zinv is None else phi @ st.Zinv
        width = np.sqrt(np.maximum(np.einsum("ij,ij->i", phi, v), 0.0))
        if self._config.variant == "frozen":
            mean = phi @ st.w
        else:
            mean = forward_batch(A, self._net)
        U = mean + st.gamma * width + self._config.offset
        return U.reshape(-1, 2)

    def predict(self, X) -> np.ndarray:
        U = self.decision_values(X)
        return np.where(U[:, 0] >= U[:, 1], 1, -1)

    __call__ = predict


def make_learner(config: LearnerConfig, input_dim: int, width: int, depth: int, seed: int) -> BaseLearner:
    """Build a learner with a fresh network; ``input_dim`` is the raw context dimension d."""
    net = init_network(2 * input_dim, width, depth, seed, variant=config.variant)
    return BaseLearner(config, net)
