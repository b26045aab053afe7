"""Regret-balancing model selection over a pool of selective samplers.

Each round the meta-learner polls every active base learner for its would-be
decision (query flag I, action a, threshold B) without touching its state,
samples one learner i_t with probability proportional to d_i^-(gamma+1),
plays its action and, if that learner wants the label, queries it and
updates only that learner. Four tests then prune learners whose observed
behaviour contradicts their (S_i, d_i) hypothesis:

1. disagreement among non-querying learners,
2. observed regret against another learner on rounds where only i queried,
3. label complexity above what the margin condition allows,
4. d-test on the capped sum of squared thresholds.

A change of the active set starts a new epoch and recomputes the sampling
distribution; within an epoch the distribution is constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._validation import check_positive_int, check_probability
from .bounds import l_term
from .learner import (
    D_TEST_CONSTANT,
    AugmentedPoint,
    BaseLearner,
    Decision,
    LearnerConfig,
)
from .network import TrainConfig, init_network
from .ntk import d_diagnostic

TEST_NAMES = ("disagreement", "observed_regret", "label_complexity", "d_test")


class PoolExhaustedError(RuntimeError):
    """Every base learner has been eliminated."""


@dataclass
class LearnerSpec:
    S: float
    d: float
    learner: BaseLearner = field(repr=False)


def s_grid(T: int) -> list[float]:
    """S_i = 2^i for i = 0 .. ceil(log2 T)."""
    T = check_positive_int(T, "T", minimum=2)
    return [2.0 ** i for i in range(math.ceil(math.log2(T)) + 1)]


def d_grid(T: int, M_bound_hint: int, delta: float) -> list[float]:
    """d_i = 2^i for i = 0 .. ceil(2 log2 T + log2 log(M log T / delta)).

    The log det(I + H) factor can grow linearly in T, so d(S, delta) can reach
    order T^2; the doubled log T exponent keeps such values inside the grid.
    """
    T = check_positive_int(T, "T", minimum=2)
    M_bound_hint = check_positive_int(M_bound_hint, "M_bound_hint")
    check_probability(delta, "delta")
    extra = math.log2(max(math.log(M_bound_hint * math.log(T) / delta), 2.0))
    top = math.ceil(2.0 * math.log2(T) + extra)
    return [2.0 ** i for i in range(top + 1)]


def make_pool(T: int, M_bound_hint: int, delta: float, *, input_dim: int, width: int,
              depth: int = 2, seed: int = 0, variant: str = "frozen",
              train: TrainConfig | None = None, S_values: Sequence[float] | None = None,
              d_values: Sequence[float] | None = None) -> list[LearnerSpec]:
    """Cross product of the S and d grids, one base learner per distinct pair.

    All learners share a single initial network drawn from ``seed``, so a pool
    of one behaves exactly like a bare learner built with the same seed.
    """
    S_values = s_grid(T) if S_values is None else list(S_values)
    d_values = d_grid(T, M_bound_hint, delta) if d_values is None else list(d_values)
    if any(d <= 0 for d in d_values):
        raise ValueError("d values must be > 0")
    net = init_network(2 * input_dim, width, depth, seed, variant=variant)
    horizon = T if variant == "nonfrozen" else None
    pool, seen = [], set()
    for S in S_values:
        cfg = LearnerConfig(S=float(S), delta=delta, variant=variant, horizon_T=horizon, train=train)
        for d in d_values:
            if (float(S), float(d)) in seen:
                continue
            seen.add((float(S), float(d)))
            pool.append(LearnerSpec(float(S), float(d), BaseLearner(cfg, net)))
    return pool


def well_specified_index(pool: Sequence[LearnerSpec], S_true: float, L_H: float,
                         delta: float) -> int | None:
    """Index of a learner with sqrt2 S <= S_i <= 2 sqrt2 S and d(S_i) <= d_i <= 2 d(S_i).

    Among several candidates the one with the smallest (S_i, d_i) is returned.
    """
    M = len(pool)
    lo, hi = math.sqrt(2.0) * S_true, 2.0 * math.sqrt(2.0) * S_true
    best = None
    for i, spec in enumerate(pool):
        if not lo * (1 - 1e-12) <= spec.S <= hi * (1 + 1e-12):
            continue
        need = d_diagnostic(spec.S, delta, L_H, M)
        if need <= spec.d <= 2.0 * need:
            if best is None or (spec.S, spec.d) < (pool[best].S, pool[best].d):
                best = i
    return best


@dataclass(frozen=True)
class MetaConfig:
    delta: float
    gamma_exp: float
    horizon_T: int
    epsilon_grid: tuple[float, ...] | None = None
    d_constant: float = D_TEST_CONSTANT["frozen"]

    def __post_init__(self):
        check_probability(self.delta, "delta")
        if not self.gamma_exp >= 0:
            raise ValueError("gamma_exp must be >= 0")
        check_positive_int(self.horizon_T, "horizon_T")
        if self.epsilon_grid is None:
            object.__setattr__(self, "epsilon_grid", default_epsilon_grid(self.horizon_T, self.gamma_exp))
        elif any(not 0 < e for e in self.epsilon_grid):
            raise ValueError("epsilon_grid entries must be > 0")


def default_epsilon_grid(T: int, gamma_exp: float, size: int = 32) -> tuple[float, ...]:
    """32 geometric points from 1/2 down to (1 / 3T)^(1 / max(gamma, 1))."""
    low = (1.0 / (3.0 * T)) ** (1.0 / max(gamma_exp, 1.0))
    low = min(low, 0.5)
    return tuple(float(e) for e in np.geomspace(0.5, low, size))


@dataclass
class MetaState:
    S: np.ndarray
    d: np.ndarray
    active: list[int]
    probs: np.ndarray
    pair_count: np.ndarray
    pair_lossdiff: np.ndarray
    pair_bsum: np.ndarray
    T_count: np.ndarray
    I_sum: np.ndarray
    IB2_quarter: np.ndarray
    IB2_half: np.ndarray
    epoch: int = 0
    t: int = 0
    # this round's polled decisions over the active set
    round_query: np.ndarray | None = None
    round_action: np.ndarray | None = None
    eliminated: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.S.size


def sampling_probs(d: np.ndarray, gamma_exp: float) -> np.ndarray:
    """d_i^-(gamma+1), normalized; evaluated in log space to avoid underflow."""
    logw = -(gamma_exp + 1.0) * np.log(np.asarray(d, dtype=float))
    w = np.exp(logw - logw.max())
    return w / w.sum()


def init_state(pool: Sequence[LearnerSpec], config: MetaConfig) -> MetaState:
    M = len(pool)
    if M == 0:
        raise ValueError("empty pool")
    S = np.array([p.S for p in pool])
    d = np.array([p.d for p in pool])
    zeros = np.zeros((M, M))
    return MetaState(
        S=S, d=d, active=list(range(M)), probs=sampling_probs(d, config.gamma_exp),
        pair_count=zeros.copy(), pair_lossdiff=zeros.copy(), pair_bsum=zeros.copy(),
        T_count=np.zeros(M, dtype=np.int64), I_sum=np.zeros(M), IB2_quarter=np.zeros(M),
        IB2_half=np.zeros(M),
    )


def select_learner(state: MetaState, config: MetaConfig, rng: np.random.Generator) -> int:
    assert state.active, "no active base learner left"
    k = rng.choice(len(state.active), p=state.probs)
    return state.active[int(k)]


def disagreement_test(state: MetaState, config: MetaConfig) -> set[int]:
    """Over non-querying learners, each disagreeing pair (i, j) removes every S_m <= min(S_i, S_j)."""
    act = np.asarray(state.active)
    quiet = state.round_query == 0
    if not quiet.any():
        return set()
    acts, S_q = state.round_action[quiet], state.S[act[quiet]]
    plus, minus = S_q[acts == 1], S_q[acts == -1]
    if plus.size == 0 or minus.size == 0:
        return set()
    # with binary actions, max over disagreeing pairs of min(S_i, S_j)
    cut = min(plus.max(), minus.max())
    return {int(i) for i in act[state.S[act] <= cut]}


def _rows(state: MetaState, rows) -> list[int]:
    return list(state.active) if rows is None else [i for i in rows if i in set(state.active)]


def observed_regret_test(state: MetaState, config: MetaConfig, rows=None) -> set[int]:
    """Eliminate i if, over V_{t,i,j} for some active j, the loss difference exceeds
    sum(1 ^ B_i) + 1.45 sqrt(|V| L(|V|, delta)).

    ``rows`` restricts which learners i are examined (all active by default).
    """
    act = np.asarray(state.active)
    cand = np.asarray(_rows(state, rows), dtype=np.int64)
    if cand.size == 0:
        return set()
    n = state.pair_count[np.ix_(cand, act)]
    diff = state.pair_lossdiff[np.ix_(cand, act)]
    bsum = state.pair_bsum[np.ix_(cand, act)]
    has = n > 0
    L = np.zeros_like(n)
    # vectorized l_term
    L[has] = math.log(5.2 / config.delta) + 1.4 * np.log(np.log(2.0 * n[has]))
    slack = 1.45 * np.sqrt(np.maximum(n * L, 0.0))
    hit = has & (diff > bsum + slack)
    return {int(cand[i]) for i in np.flatnonzero(hit.any(axis=1))}


def label_complexity_threshold(T_count: int, IB2_quarter: float, gamma_exp: float,
                               eps_grid: Sequence[float], delta: float, M: int, t: int) -> float:
    eps = np.asarray(eps_grid, dtype=float)
    inf_term = np.min(3.0 * eps ** gamma_exp * T_count + IB2_quarter / eps ** 2)
    return float(inf_term + 2.0 * l_term(T_count, delta / (M * math.log2(12.0 * t))))


def label_complexity_test(state: MetaState, config: MetaConfig, M: int | None = None,
                          rows=None) -> set[int]:
    M = state.M if M is None else M
    out = set()
    for i in _rows(state, rows):
        n = int(state.T_count[i])
        if n == 0:
            continue
        thr = label_complexity_threshold(n, state.IB2_quarter[i], config.gamma_exp,
                                         config.epsilon_grid, config.delta, M, max(state.t, 1))
        if state.I_sum[i] > thr:
            out.add(i)
    return out


def d_test(state: MetaState, config: MetaConfig, rows=None) -> set[int]:
    return {i for i in _rows(state, rows) if state.IB2_half[i] > config.d_constant * state.d[i]}


@dataclass(frozen=True)
class MetaRound:
    t: int
    epoch: int
    chosen: int
    action: int
    query: bool
    active_set: tuple[int, ...]
    eliminations: tuple[tuple[int, str], ...]
    decision: Decision = field(repr=False)
    snapshot: object = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {
            "t": self.t, "epoch": self.epoch, "chosen": self.chosen, "action": self.action,
            "queried": self.query, "active_set": list(self.active_set),
            "eliminations": [{"who": w, "which_test": k} for w, k in self.eliminations],
        }


def _poll(pool: Sequence[LearnerSpec], active: Sequence[int], point: AugmentedPoint) -> dict[int, Decision]:
    """Every active learner's would-be decision, sharing work where states coincide."""
    feats: dict[int, np.ndarray] = {}
    fresh: dict[tuple, Decision] = {}
    out = {}
    for i in active:
        lrn = pool[i].learner
        key = id(lrn.net)
        if key not in feats:
            feats[key] = lrn.features(point)
        if lrn.state.queries == 0:
            fkey = (key, lrn.config)
            if fkey not in fresh:
                fresh[fkey] = lrn.observe(point, feats[key])
            out[i] = fresh[fkey]
        else:
            out[i] = lrn.observe(point, feats[key])
    return out


def step(state: MetaState, config: MetaConfig, pool: Sequence[LearnerSpec], point: AugmentedPoint,
         label_oracle: Callable[[], int], rng: np.random.Generator, snapshot: bool = False):
    """One round; returns (prediction, queried flag, state, MetaRound).

    With ``snapshot`` the chosen learner's predictor is copied before its update.
    """
    state.t += 1
    t = state.t
    active = list(state.active)
    decisions = _poll(pool, active, point)
    i_t = select_learner(state, config, rng)
    dec = decisions[i_t]
    state.round_query = np.array([int(decisions[i].query) for i in active])
    state.round_action = np.array([decisions[i].action for i in active])

    snap = pool[i_t].learner.snapshot_classifier() if snapshot else None
    state.T_count[i_t] += 1
    if dec.query:
        y = int(label_oracle())
        B2 = dec.B * dec.B
        state.I_sum[i_t] += 1.0
        state.IB2_quarter[i_t] += min(B2, 0.25)
        state.IB2_half[i_t] += min(B2, 0.5)
        for j in active:
            dj = decisions[j]
            if j == i_t or dj.query or dj.action == dec.action:
                continue
            state.pair_count[i_t, j] += 1
            state.pair_lossdiff[i_t, j] += int(dec.action != y) - int(dj.action != y)
            state.pair_bsum[i_t, j] += min(1.0, dec.B)
        pool[i_t].learner.update(point, dec, int(dec.action != y))

    removed: list[tuple[int, str]] = []
    gone: set[int] = set()
    # Tests 2-4 only read statistics of the chosen learner i_t, which are the only
    # ones this round changed; for every other learner the label-complexity
    # threshold grows with t, so none of them can newly trigger.
    rows = [i_t]
    tests = (
        ("disagreement", lambda: disagreement_test(state, config)),
        ("observed_regret", lambda: observed_regret_test(state, config, rows=rows)),
        ("label_complexity", lambda: label_complexity_test(state, config, rows=rows)),
        ("d_test", lambda: d_test(state, config, rows=rows)),
    )
    # every test scans the round's starting set; removals take effect next round
    for name, run in tests:
        for i in sorted(run() - gone):
            gone.add(i)
            removed.append((i, name))
            state.eliminated[i] = {"t": t, "test": name}
    if gone:
        state.active = [i for i in active if i not in gone]
        if not state.active:
            raise PoolExhaustedError(f"all base learners eliminated at round {t}")
        state.probs = sampling_probs(state.d[state.active], config.gamma_exp)
        state.epoch += 1
    rnd = MetaRound(t, state.epoch, i_t, dec.action, dec.query, tuple(state.active),
                    tuple(removed), dec, snap)
    return dec.action, dec.query, state, rnd


class MetaLearner:
    """Stateful driver around :func:`step` with its own seeded sampler."""

    def __init__(self, pool: Sequence[LearnerSpec], config: MetaConfig, seed: int = 0):
        self.pool = list(pool)
        self.config = config
        self.state = init_state(self.pool, config)
        self.rng = np.random.default_rng(seed)

    def step(self, point: AugmentedPoint, label_oracle: Callable[[], int],
             snapshot: bool = False) -> MetaRound:
        return step(self.state, self.config, self.pool, point, label_oracle, self.rng, snapshot)[3]

    def summary(self) -> dict:
        st = self.state
        return {
            "rounds": st.t, "epochs": st.epoch, "pool_size": st.M,
            "survivors": list(st.active),
            "learners": [
                {"index": i, "S": p.S, "d": p.d, "chosen": int(st.T_count[i]),
                 "queries": int(st.I_sum[i]), "survived": i in st.active,
                 "eliminated": st.eliminated.get(i)}
                for i, p in enumerate(self.pool)
            ],
        }
