"""Synthetic i.i.d. streams with a known Bayes function h and controlled margins.

Every stream is a deterministic function of its seed, and prefixes are stable:
the first k records of a length-T stream equal the length-k stream, because
each random quantity is drawn from its own child generator.

Margin-controlled streams (d = 2) draw the margin magnitude
M = |h((x,0)) - 1/2| as

* ``alpha = inf``: M = hard_margin_eps,
* ``alpha > 0``:  M = U^(1/alpha) / 2, so P(M < eps) = (2 eps)^alpha,
* ``alpha = 0``:  log-uniform on [margin_floor, 1/2], which puts mass near
  zero at every scale while still satisfying the condition with c = 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np
import scipy.special

from ._validation import check_positive_int, flatten_augmented
from .ntk import complexity_S, logdet_identity_plus, ntk_matrix

Kind = Literal["linear", "margin_controlled", "ntk_rkhs"]


@dataclass(frozen=True)
class NoiseProfile:
    alpha: float = 1.0
    hard_margin_eps: float = 0.1
    margin_floor: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.hard_margin_eps <= 0.5:
            raise ValueError("hard_margin_eps must lie in (0, 1/2]")
        if not 0 < self.margin_floor < 0.5:
            raise ValueError("margin_floor must lie in (0, 1/2)")

    @property
    def constant(self) -> float:
        """c in P(M < eps) <= c eps^alpha for the margin-controlled generator."""
        return 1.0 if self.alpha in (0.0, math.inf) else 2.0 ** self.alpha

    def margin_cdf(self, eps):
        """Exact P(M < eps) of the margin-controlled generator."""
        eps = np.asarray(eps, dtype=float)
        if math.isinf(self.alpha):
            return (eps > self.hard_margin_eps).astype(float)
        if self.alpha == 0:
            lo = math.log(self.margin_floor)
            frac = (np.log(np.clip(eps, self.margin_floor, 0.5)) - lo) / (math.log(0.5) - lo)
            return np.clip(frac, 0.0, 1.0)
        return np.clip(2.0 * eps, 0.0, 1.0) ** self.alpha


@dataclass
class EnvironmentModel:
    kind: Kind
    d: int
    theta_star: np.ndarray | None = None
    # ntk_rkhs only: fixed raw contexts and their h((x,0)) values
    points: np.ndarray | None = field(default=None, repr=False)
    h_points: np.ndarray | None = field(default=None, repr=False)
    achieved_S: float | None = None
    depth: int = 2

    def __post_init__(self):
        self.d = check_positive_int(self.d, "d")
        if self.kind == "margin_controlled" and self.d != 2:
            raise ValueError("margin_controlled streams live in d = 2")
        if self.kind in ("linear", "margin_controlled"):
            if self.theta_star is None:
                self.theta_star = np.eye(self.d)[0]
            self.theta_star = np.asarray(self.theta_star, dtype=float)
            if abs(np.linalg.norm(self.theta_star) - 1.0) > 1e-9:
                raise ValueError("theta_star must be a unit vector")
        elif self.kind == "ntk_rkhs":
            if self.points is None or self.h_points is None:
                raise ValueError("use build_rkhs_model to create ntk_rkhs environments")
        else:
            raise ValueError(f"unknown environment kind {self.kind!r}")

    def h_plus(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "ntk_rkhs":
            idx = _match_rows(X, self.points)
            return self.h_points[idx]
        return 0.5 * (1.0 + X @ self.theta_star)


def _match_rows(X, P) -> np.ndarray:
    dist = np.abs(X[:, None, :] - P[None, :, :]).max(axis=2)
    idx = dist.argmin(axis=1)
    if np.any(dist[np.arange(len(X)), idx] > 1e-12):
        raise ValueError("context is not part of the environment's point set")
    return idx


@dataclass(frozen=True)
class StreamRecord:
    x: np.ndarray
    h_plus: float
    y: int
    a_star: int
    margin: float


@dataclass
class Stream:
    """Column-oriented stream; iterating yields :class:`StreamRecord` rows."""

    X: np.ndarray
    h_plus: np.ndarray
    y: np.ndarray

    @property
    def a_star(self) -> np.ndarray:
        return np.where(self.h_plus >= 0.5, 1, -1)

    @property
    def margin(self) -> np.ndarray:
        return self.h_plus - 0.5

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i) -> StreamRecord:
        return StreamRecord(self.X[i], float(self.h_plus[i]), int(self.y[i]),
                            int(self.a_star[i]), float(self.margin[i]))

    def __iter__(self) -> Iterator[StreamRecord]:
        return (self[i] for i in range(len(self)))

    def head(self, k: int) -> "Stream":
        return Stream(self.X[:k], self.h_plus[:k], self.y[:k])

    def to_csv(self, path) -> None:
        d = self.X.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(d)] + ["h_plus", "y", "a_star", "margin"])
            for r in self:
                w.writerow([repr(float(v)) for v in r.x] + [repr(r.h_plus), r.y, r.a_star, repr(r.margin)])

    @classmethod
    def from_csv(cls, path) -> "Stream":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("x"))
        data = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        return cls(data[:, :d], data[:, d], data[:, d + 1].astype(np.int64))


def _children(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng([int(seed) & (2**64 - 1), k]) for k in range(n)]


def _unit_sphere(rng: np.random.Generator, T: int, d: int) -> np.ndarray:
    X = rng.standard_normal((T, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def sample_margins(noise: NoiseProfile, rng: np.random.Generator, T: int) -> np.ndarray:
    U = rng.random(T)
    if math.isinf(noise.alpha):
        return np.full(T, noise.hard_margin_eps)
    if noise.alpha == 0:
        return 0.5 * np.exp(U * math.log(2.0 * noise.margin_floor))
    return 0.5 * U ** (1.0 / noise.alpha)


def generate(model: EnvironmentModel, noise: NoiseProfile | None, T: int, seed: int) -> Stream:
    """Draw T records; labels are y = +1 with probability h((x,0))."""
    if T < 0:
        raise ValueError("T must be >= 0")
    rx, ry, rs, rb = _children(seed, 4)
    if model.kind == "linear":
        X = _unit_sphere(rx, T, model.d)
        h = model.h_plus(X) if T else np.zeros(0)
    elif model.kind == "margin_controlled":
        noise = noise or NoiseProfile()
        M = sample_margins(noise, rx, T)
        sign = np.where(rs.random(T) < 0.5, 1.0, -1.0)
        branch = np.where(rb.random(T) < 0.5, 1.0, -1.0)
        base = math.atan2(model.theta_star[1], model.theta_star[0])
        ang = base + branch * np.arccos(np.clip(2.0 * M * sign, -1.0, 1.0))
        X = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        h = 0.5 + M * sign
        # keep |h - 1/2| >= M after rounding (e.g. 0.7 - 0.5 < 0.2 in binary)
        short = np.abs(h - 0.5) < M
        h[short] = np.nextafter(h[short], np.where(sign[short] > 0, np.inf, -np.inf))
    else:
        idx = rx.integers(0, model.points.shape[0], size=T)
        X = model.points[idx]
        h = model.h_points[idx]
    y = np.where(ry.random(T) < h, 1, -1).astype(np.int64)
    return Stream(X.reshape(T, model.d), np.asarray(h, dtype=float), y)


def build_rkhs_model(d: int, n_points: int, target_S: float, depth: int = 2, seed: int = 0) -> EnvironmentModel:
    """Fixed point set with h = 1/2 + c v for a random antisymmetric direction v.

    Equivalently h = H w with w = H^-1 h. With the plus-then-minus layout
    H = [[A, B], [B, A]], an antisymmetric v keeps h((x,0)) + h((0,x)) = 1 and
    is H^-1-orthogonal to the constant 1/2, so S^2 = S0^2 + c^2 v^T H^-1 v with
    S0^2 = 1^T H^-1 1 / 4. The scale c is solved exactly; targets outside
    [S0, S_max] (h restricted to [0.05, 0.95]) raise with the achievable range.
    """
    rng = np.random.default_rng(seed)
    P = _unit_sphere(rng, n_points, d)
    Z = flatten_augmented(P)
    report = ntk_matrix(Z, depth)
    u = rng.uniform(-1.0, 1.0, n_points)
    v = np.concatenate([u, -u])
    s0 = complexity_S(np.full(2 * n_points, 0.5), report).S
    norm_v = complexity_S(v, report).S
    c_max = 0.45 / np.max(np.abs(v))
    s_max = math.sqrt(s0 ** 2 + (c_max * norm_v) ** 2)
    if not (s0 - 1e-12 <= target_S <= s_max):
        raise ValueError(f"target S={target_S:g} unreachable; achievable range is [{s0:.6g}, {s_max:.6g}]")
    c = math.sqrt(max(target_S ** 2 - s0 ** 2, 0.0)) / norm_v
    h = 0.5 + c * v
    achieved = complexity_S(h, report).S
    return EnvironmentModel("ntk_rkhs", d, points=P, h_points=h[:n_points].copy(),
                            achieved_S=achieved, depth=depth)


def stream_complexity(stream: Stream, depth: int = 2, with_lambda0: bool = False) -> dict:
    """S_{T,n}(h) and L_H over the augmented stream points.

    S uses the distinct contexts (repeated points make H singular while leaving
    h^T H^+ h unchanged). L_H counts every round: with the selection matrix P
    mapping rounds to distinct points, log det(I + P H P^T) equals
    log det(I + D^1/2 H D^1/2) for the diagonal count matrix D.
    """
    X = stream.X
    uniq, keep, counts = np.unique(np.round(X, 12), axis=0, return_index=True, return_counts=True)
    order = np.argsort(keep)
    keep, counts = keep[order], counts[order]
    Xu = X[keep]
    hu = np.concatenate([stream.h_plus[keep], 1.0 - stream.h_plus[keep]])
    rep_u = ntk_matrix(flatten_augmented(Xu), depth, compute_lambda0=with_lambda0)
    S = complexity_S(hu, rep_u).S
    if len(keep) == len(X):
        L_H = rep_u.L_H
    else:
        r = np.sqrt(np.concatenate([counts, counts]).astype(float))
        L_H = logdet_identity_plus(rep_u.H * np.outer(r, r))
    return {"S": S, "L_H": L_H, "lambda0": rep_u.lambda0, "distinct": int(len(keep))}


class ExperimentLog:
    """Cumulative regret / label accounting for one run."""

    def __init__(self, eps_grid: Sequence[float] = (0.05, 0.1, 0.2, 0.3)):
        self.eps_grid = tuple(float(e) for e in eps_grid)
        self.regret_curve: list[float] = []
        self.query_curve: list[int] = []
        self.T_eps = {e: 0 for e in self.eps_grid}
        self.records: list[dict] = []

    @property
    def regret(self) -> float:
        return self.regret_curve[-1] if self.regret_curve else 0.0

    @property
    def queries(self) -> int:
        return self.query_curve[-1] if self.query_curve else 0

    def score(self, record: StreamRecord, action: int, query: bool) -> float:
        """Add one round; returns the regret increment h(x_{a*}) - h(x_{a_t})."""
        inc = 2.0 * abs(record.margin) if action != record.a_star else 0.0
        self.regret_curve.append(self.regret + inc)
        self.query_curve.append(self.queries + int(bool(query)))
        for e in self.eps_grid:
            if record.margin ** 2 <= e ** 2:
                self.T_eps[e] += 1
        return inc


def score(log: ExperimentLog, record: StreamRecord, decision) -> ExperimentLog:
    log.score(record, decision.action, decision.query)
    return log


def excess_risk(predict, holdout: Stream) -> float:
    """Mean over the holdout of max(h, 1 - h) - h(x_{a_hat})."""
    if len(holdout) == 0:
        return 0.0
    a_hat = np.asarray(predict(holdout.X))
    h = holdout.h_plus
    chosen = np.where(a_hat == 1, h, 1.0 - h)
    return float(np.mean(np.maximum(h, 1.0 - h) - chosen))


def online_to_batch(snapshot, holdout: Stream) -> float:
    """Excess risk of the snapshot pre-registered at a uniform random round."""
    if snapshot is None:
        raise ValueError("the run did not record an online-to-batch snapshot")
    return excess_risk(snapshot.predict, holdout)


def linear_margin_cdf(eps, d: int):
    """P(|h((x,0)) - 1/2| < eps) = P(|<theta, x>| < 2 eps) for x uniform on S^{d-1}."""
    a = np.clip(2.0 * np.asarray(eps, dtype=float), 0.0, 1.0)
    if d == 1:
        return (a >= 1.0).astype(float)
    return scipy.special.betainc(0.5, (d - 1) / 2.0, a * a)


def verify_noise(margins, noise: NoiseProfile | None, eps_grid, expected_cdf=None,
                 n_sigma: float = 3.0) -> list[dict]:
    """Empirical P(|Delta| < eps) per grid point against the c eps^alpha bound.

    ``expected_cdf`` (callable) adds a calibration check of the empirical CDF.
    Standard errors use the reference probability when one is available, so
    an exact-zero reference demands an exact-zero empirical frequency.
    """
    absm = np.abs(np.asarray(margins, dtype=float))
    n = absm.size
    rows = []
    for eps in eps_grid:
        p_hat = float(np.mean(absm < eps)) if n else 0.0
        row = {"eps": float(eps), "n": n, "p_hat": p_hat}
        if noise is not None:
            if math.isinf(noise.alpha):
                # hard margin: no mass below eps0, no constraint above it
                bound = 0.0 if eps <= noise.hard_margin_eps else 1.0
            else:
                bound = noise.constant * eps ** noise.alpha
            se = math.sqrt(max(bound * (1 - bound), 0.0) / n) if bound < 1 else 0.0
            row.update(bound=bound, bound_ok=bool(p_hat <= bound + n_sigma * se))
        if expected_cdf is not None:
            ref = float(expected_cdf(eps))
            se = math.sqrt(ref * (1 - ref) / n)
            row.update(expected=ref, se=se, calibrated=bool(abs(p_hat - ref) <= n_sigma * se))
        rows.append(row)
    return rows
