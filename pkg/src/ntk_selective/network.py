"""Bias-free fully connected ReLU network f(x) = sqrt(m) W_n relu(... relu(W_1 x)).

Parameters are flattened layer-major (W_1 row-major, then W_2, ..., W_n) so
that gradients, feature vectors and the learners' ellipsoid statistics all
share one coordinate system. The ReLU subgradient at 0 is taken as 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from ._validation import check_positive_int

Variant = Literal["frozen", "nonfrozen"]


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """Weights ``W_1 .. W_n`` plus the snapshot ``theta0`` taken at initialization.

    ``input_dim`` is the dimension callers pass in. With ``duplicate_input``
    the network itself sees ``[x, x] / sqrt(2)`` of twice that size.
    """

    weights: tuple[np.ndarray, ...]
    width: int
    depth: int
    input_dim: int
    duplicate_input: bool = False
    theta0: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for w in self.weights:
            w.setflags(write=False)
        if self.theta0 is None:
            object.__setattr__(self, "theta0", flatten(self.weights))
        self.theta0.setflags(write=False)

    @property
    def net_input_dim(self) -> int:
        return 2 * self.input_dim if self.duplicate_input else self.input_dim

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def param_count(self) -> int:
        return int(sum(w.size for w in self.weights))

    @property
    def theta(self) -> np.ndarray:
        return flatten(self.weights)

    def with_theta(self, theta: np.ndarray) -> "NetworkParams":
        return NetworkParams(unflatten(theta, self.shapes), self.width, self.depth,
                             self.input_dim, self.duplicate_input, self.theta0)

    def at_init(self) -> "NetworkParams":
        # already at init: hand back the same object so callers can share it
        if np.array_equal(self.theta, self.theta0):
            return self
        return self.with_theta(self.theta0)

    def save(self, path) -> None:
        np.savez(path, theta=self.theta, theta0=self.theta0,
                 meta=np.array([self.width, self.depth, self.input_dim,
                                int(self.duplicate_input)]))

    @classmethod
    def load(cls, path) -> "NetworkParams":
        with np.load(path) as data:
            m, n, d, dup = (int(v) for v in data["meta"])
            shapes = _layer_shapes(2 * d if dup else d, m, n)
            return cls(unflatten(data["theta"], shapes), m, n, d, bool(dup),
                       np.array(data["theta0"]))


def flatten(weights: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(w).ravel() for w in weights])


def unflatten(theta: np.ndarray, shapes: Sequence[tuple[int, int]]) -> tuple[np.ndarray, ...]:
    theta = np.asarray(theta, dtype=float)
    out, pos = [], 0
    for r, c in shapes:
        out.append(theta[pos:pos + r * c].reshape(r, c).copy())
        pos += r * c
    if pos != theta.size:
        raise ValueError(f"theta has {theta.size} entries, shapes need {pos}")
    return tuple(out)


def _layer_shapes(in_dim: int, m: int, n: int) -> list[tuple[int, int]]:
    return [(m, in_dim)] + [(m, m)] * (n - 2) + [(1, m)]


def param_count(input_dim: int, m: int, n: int) -> int:
    """m + m * input_dim + m^2 (n - 2); with input_dim = 2d this is m + 2md + m^2(n-2)."""
    return m + m * input_dim + m * m * (n - 2)


def init_network(input_dim: int, m: int, n: int, seed: int,
                 variant: Variant = "frozen") -> NetworkParams:
    """Draw Gaussian weights.

    frozen: hidden entries N(0, 2/m), output entries N(0, 1/m).
    nonfrozen: each half of a width-m network gets hidden entries N(0, 4/m)
    and output N(0, 2/m); the halves share weights, the input is duplicated
    and the output row is ``(w, -w)``, so f(x, theta0) = 0 for every x.
    """
    input_dim = check_positive_int(input_dim, "input_dim")
    m = check_positive_int(m, "m", minimum=2)
    n = check_positive_int(n, "n", minimum=2)
    rng = np.random.default_rng(seed)
    if variant == "frozen":
        shapes = _layer_shapes(input_dim, m, n)
        weights = [rng.normal(0.0, math.sqrt(2.0 / m), size=s) for s in shapes[:-1]]
        weights.append(rng.normal(0.0, math.sqrt(1.0 / m), size=shapes[-1]))
        return NetworkParams(tuple(weights), m, n, input_dim, duplicate_input=False)
    if variant != "nonfrozen":
        raise ValueError(f"unknown variant {variant!r}")
    if m % 2:
        raise ValueError("nonfrozen variant needs an even width")
    half = m // 2
    half_shapes = _layer_shapes(input_dim, half, n)
    weights = []
    for r, c in half_shapes[:-1]:
        block = rng.normal(0.0, math.sqrt(4.0 / m), size=(r, c))
        full = np.zeros((2 * r, 2 * c))
        full[:r, :c] = block
        full[r:, c:] = block
        weights.append(full)
    w_out = rng.normal(0.0, math.sqrt(2.0 / m), size=half_shapes[-1])
    weights.append(np.concatenate([w_out, -w_out], axis=1))
    return NetworkParams(tuple(weights), m, n, input_dim, duplicate_input=True)


def _network_input(X: np.ndarray, params: NetworkParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != params.input_dim:
        raise ValueError(f"input has dimension {X.shape[1]}, network expects {params.input_dim}")
    if params.duplicate_input:
        X = np.concatenate([X, X], axis=1) / math.sqrt(2.0)
    return X


def _forward_pass(X: np.ndarray, params: NetworkParams):
    acts, pres = [X], []
    a = X
    for w in params.weights[:-1]:
        z = a @ w.T
        a = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(a)
    out = math.sqrt(params.width) * (a @ params.weights[-1].T)[:, 0]
    return out, acts, pres


def forward_batch(X, params: NetworkParams) -> np.ndarray:
    return _forward_pass(_network_input(X, params), params)[0]


def forward(x, params: NetworkParams) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward expects a single 1-d input")
    return float(forward_batch(x, params)[0])


def _backprop_deltas(acts, pres, params: NetworkParams, scale: np.ndarray):
    """Per-layer output sensitivities for each row, pre-multiplied by ``scale``."""
    root_m = math.sqrt(params.width)
    deltas = [None] * params.depth
    deltas[-1] = (root_m * scale)[:, None]  # (l, 1)
    d = deltas[-1] * params.weights[-1]  # (l, m)
    for k in range(params.depth - 2, -1, -1):
        d = d * (pres[k] > 0)
        deltas[k] = d
        if k > 0:
            d = d @ params.weights[k]
    return deltas


def gradient_batch(X, params: NetworkParams) -> np.ndarray:
    """Rows are the flattened parameter gradients of f at each input."""
    Xn = _network_input(X, params)
    _, acts, pres = _forward_pass(Xn, params)
    deltas = _backprop_deltas(acts, pres, params, np.ones(Xn.shape[0]))
    blocks = [np.einsum("li,lj->lij", deltas[k], acts[k]).reshape(Xn.shape[0], -1)
              for k in range(params.depth)]
    return np.concatenate(blocks, axis=1)


def gradient(x, params: NetworkParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("gradient expects a single 1-d input")
    return gradient_batch(x, params)[0]


def feature_map(x, params: NetworkParams, at: Literal["theta0", "current"] = "theta0") -> np.ndarray:
    """g(x; theta) / sqrt(m) at the initial or the current weights.

    Accepts a single input or a batch (one feature row per input).
    """
    if at not in ("theta0", "current"):
        raise ValueError(f"at must be 'theta0' or 'current', got {at!r}")
    net = params.at_init() if at == "theta0" else params
    x = np.asarray(x, dtype=float)
    G = gradient_batch(x, net) / math.sqrt(params.width)
    return G[0] if x.ndim == 1 else G


def feature_gram(X, params: NetworkParams) -> np.ndarray:
    """G^T G for the frozen feature map without materializing G.

    Uses <dW_k(x), dW_k(y)> = <delta_k(x), delta_k(y)> <a_{k-1}(x), a_{k-1}(y)>.
    """
    net = params.at_init()
    Xn = _network_input(X, net)
    _, acts, pres = _forward_pass(Xn, net)
    deltas = _backprop_deltas(acts, pres, net, np.ones(Xn.shape[0]))
    K = sum((deltas[k] @ deltas[k].T) * (acts[k] @ acts[k].T) for k in range(net.depth))
    return K / net.width


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    J: int
    m: int

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.J < 0:
            raise ValueError("J must be >= 0")
        if self.eta * self.m >= 1:
            raise ValueError(f"eta * m = {self.eta * self.m:g} must be < 1")

    @classmethod
    def default(cls, m: int, n: int, T: int, J: int = 100) -> "TrainConfig":
        return cls(eta=0.5 / (m * n * max(T, 1)), J=J, m=m)


def train_loss(params: NetworkParams, contexts, losses, anchor: np.ndarray) -> float:
    """sum_i (f(x_i) - 1 + l_i)^2 / 2 + m ||theta - anchor||^2."""
    theta = params.theta
    reg = params.width * float(np.sum((theta - anchor) ** 2))
    if len(contexts) == 0:
        return reg
    resid = forward_batch(np.asarray(contexts), params) - 1.0 + np.asarray(losses, dtype=float)
    return 0.5 * float(resid @ resid) + reg


def _loss_gradient(params: NetworkParams, X: np.ndarray | None, losses: np.ndarray,
                   anchor: np.ndarray) -> np.ndarray:
    grad = 2.0 * params.width * (params.theta - anchor)
    if X is None:
        return grad
    out, acts, pres = _forward_pass(X, params)
    resid = out - 1.0 + losses
    deltas = _backprop_deltas(acts, pres, params, resid)
    data = np.concatenate([(deltas[k].T @ acts[k]).ravel() for k in range(params.depth)])
    return grad + data


def train_nn(config: TrainConfig, contexts, losses, theta_start: NetworkParams,
             loss_history: list | None = None) -> NetworkParams:
    """J full-batch gradient steps on the regularized squared loss, anchored at ``theta_start``.

    When ``loss_history`` is a list, the loss before every step and after the
    last one is appended to it.
    """
    contexts = list(contexts)
    losses = np.asarray(list(losses), dtype=float)
    if len(contexts) != losses.size:
        raise ValueError("contexts and losses must have equal length")
    X = _network_input(np.asarray(contexts), theta_start) if contexts else None
    anchor = theta_start.theta
    params = theta_start
    theta = anchor.copy()
    for _ in range(config.J):
        if loss_history is not None:
            loss_history.append(train_loss(params, contexts, losses, anchor))
        theta = theta - config.eta * _loss_gradient(params, X, losses, anchor)
        params = theta_start.with_theta(theta)
    if loss_history is not None:
        loss_history.append(train_loss(params, contexts, losses, anchor))
    return params
