"""Experiment orchestration: configs, multi-trial runs, traces, verification and summaries.

Each trial owns its stream, network and samplers, all seeded from one
per-trial integer, so results do not depend on how many worker threads run
the batch. Per-round traces are JSONL, cumulative curves CSV (t, R_t, N_t),
and the batch summary JSON.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ._validation import check_positive_int, check_probability, check_unit_norm, flatten_augmented
from .bounds import elliptical_check_trace
from .environment import (
    EnvironmentModel,
    ExperimentLog,
    NoiseProfile,
    Stream,
    build_rkhs_model,
    excess_risk,
    generate,
    stream_complexity,
)
from .learner import D_TEST_CONSTANT, AugmentedPoint, LearnerConfig, make_learner
from .model_selection import MetaConfig, MetaLearner, make_pool, well_specified_index
from .network import TrainConfig
from .ntk import complexity_S, ntk_matrix

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


@dataclass
class EnvSpec:
    kind: str = "linear"
    d: int = 5
    alpha: float = 1.0
    hard_margin_eps: float = 0.1
    margin_floor: float = 1e-4
    theta_star: list | None = None
    n_points: int = 64
    target_S: float = 2.0
    model_seed: int = 0


@dataclass
class LearnerSpecConfig:
    variant: str = "frozen"
    # a number, or "auto" to use S_scale * S_{T,n}(h) computed on each trial's stream
    S: Any = "auto"
    S_scale: float = 2.0 * math.sqrt(2.0)
    # compute the "auto" S on at most this many leading rounds (None: the whole stream)
    S_points: int | None = None
    always_query: bool = False
    J: int = 100
    eta: float | None = None


@dataclass
class PoolSpec:
    S_values: list | None = None
    d_values: list | None = None
    M_bound_hint: int = 1
    # compute S_{T,n}(h) and L_H per trial to locate the well-specified learner
    track_well_specified: bool = True


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    learner: LearnerSpecConfig = field(default_factory=LearnerSpecConfig)
    pool: PoolSpec = field(default_factory=PoolSpec)
    T: int = 1000
    trials: int = 1
    seed: int = 0
    seeds: list | None = None
    width: int = 32
    depth: int = 2
    delta: float = 0.05
    gamma_exp: float = 1.0
    holdout: int = 1000
    trace: str = "full"
    workers: int = 1
    output_dir: str | None = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvSpec(**self.env)
        if isinstance(self.learner, dict):
            self.learner = LearnerSpecConfig(**self.learner)
        if isinstance(self.pool, dict):
            self.pool = PoolSpec(**self.pool)
        self.validate()

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        check_positive_int(self.trials, "trials")
        check_positive_int(self.width, "width", minimum=2)
        check_positive_int(self.depth, "depth", minimum=2)
        check_positive_int(self.workers, "workers")
        check_probability(self.delta, "delta")
        if self.gamma_exp < 0:
            raise ValueError("gamma must be >= 0")
        if self.trace not in ("full", "summary"):
            raise ValueError("trace must be 'full' or 'summary'")
        if self.seeds is not None and len(self.seeds) != self.trials:
            raise ValueError("explicit seeds must have one entry per trial")
        if self.learner.variant not in ("frozen", "nonfrozen"):
            raise ValueError(f"unknown variant {self.learner.variant!r}")
        if not (self.learner.S == "auto" or float(self.learner.S) >= 0):
            raise ValueError("learner S must be 'auto' or a number >= 0")
        if self.learner.S_points is not None:
            check_positive_int(self.learner.S_points, "S_points")

    def trial_seeds(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        state = np.random.SeedSequence(self.seed).generate_state(self.trials, dtype=np.uint32)
        return [int(s) for s in state]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def build_environment(spec: EnvSpec, depth: int = 2) -> tuple[EnvironmentModel, NoiseProfile]:
    noise = NoiseProfile(alpha=float(spec.alpha), hard_margin_eps=spec.hard_margin_eps,
                         margin_floor=spec.margin_floor)
    if spec.kind == "ntk_rkhs":
        model = build_rkhs_model(spec.d, spec.n_points, spec.target_S, depth, spec.model_seed)
    else:
        theta = None if spec.theta_star is None else np.asarray(spec.theta_star, dtype=float)
        model = EnvironmentModel(spec.kind, spec.d, theta_star=theta)
    return model, noise


def _child_seeds(seed: int) -> dict[str, int]:
    names = ("stream", "net", "sampler", "snapshot", "holdout")
    vals = np.random.SeedSequence(seed).generate_state(len(names), dtype=np.uint32)
    return {k: int(v) for k, v in zip(names, vals)}


@dataclass
class TrialResult:
    trial: int
    seed: int
    R_T: float = 0.0
    N_T: int = 0
    excess_risk: float | None = None
    t_star: int | None = None
    unqueried: int = 0
    unqueried_mistakes: int = 0
    # base runs only: rounds whose chosen margin estimate U_{t,a_t} - 1/2 was negative
    negative_margins: int | None = None
    logdetZ_T: float | None = None
    elliptical_ok: dict | None = None
    invariant_violations: int = 0
    S_used: float | None = None
    S_computed: float | None = None
    L_H: float | None = None
    aborted: str | None = None
    extra: dict = field(default_factory=dict)
    curve: list = field(default_factory=list, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("curve", "trace", "extra")}
        if out["elliptical_ok"] is not None:
            out["elliptical_ok"] = {str(k): v for k, v in out["elliptical_ok"].items()}
        out.update(self.extra)
        return out


@dataclass
class SummaryReport:
    kind: str
    config: dict
    rows: list[dict]
    wall_clock: float = 0.0

    def aggregate(self) -> dict:
        out: dict[str, Any] = {"trials": len(self.rows),
                               "aborted": sum(1 for r in self.rows if r.get("aborted"))}
        for key in ("R_T", "N_T", "excess_risk"):
            vals = np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=float)
            if vals.size:
                out[key] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                            "q10": float(np.quantile(vals, 0.1)), "q90": float(np.quantile(vals, 0.9))}
        out["invariant_violations"] = int(sum(r.get("invariant_violations", 0) for r in self.rows))
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "wall_clock": self.wall_clock,
                "aggregate": self.aggregate(), "rows": self.rows}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=_json_default)

    @classmethod
    def load(cls, path) -> "SummaryReport":
        with open(path) as fh:
            data = json.load(fh)
        return cls(data["kind"], data["config"], data["rows"], data.get("wall_clock", 0.0))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _round_extra(rec, inc: float) -> dict:
    return {"h_plus": rec.h_plus, "a_star": rec.a_star, "regret_inc": inc}


def _check_monotone(values) -> int:
    v = np.asarray(values, dtype=float)
    return int(np.sum(np.diff(v) < 0)) if v.size > 1 else 0


def _resolve_S(config: ExperimentConfig, model: EnvironmentModel, stream: Stream,
               result: TrialResult, need: bool) -> float | None:
    """Fill S_computed / L_H when required and return the learner's S."""
    if need and len(stream):
        k = config.learner.S_points
        comp = stream_complexity(stream if k is None else stream.head(k), config.depth)
        result.S_computed, result.L_H = comp["S"], comp["L_H"]
    S = config.learner.S
    if S == "auto":
        if result.S_computed is None:
            return 0.0
        return config.learner.S_scale * result.S_computed
    return float(S)


def _train_config(config: ExperimentConfig) -> TrainConfig | None:
    if config.learner.variant != "nonfrozen":
        return None
    lc = config.learner
    if lc.eta is None:
        return TrainConfig.default(config.width, config.depth, max(config.T, 1), J=lc.J)
    return TrainConfig(eta=lc.eta, J=lc.J, m=config.width)


def run_base_trial(config: ExperimentConfig, trial: int, seed: int,
                   model: EnvironmentModel, noise: NoiseProfile) -> TrialResult:
    seeds = _child_seeds(seed)
    result = TrialResult(trial=trial, seed=seed)
    stream = generate(model, noise, config.T, seeds["stream"])
    try:
        S = _resolve_S(config, model, stream, result, need=config.learner.S == "auto")
        result.S_used = S
        lcfg = LearnerConfig(S=S, delta=config.delta, variant=config.learner.variant,
                             horizon_T=max(config.T, 1), train=_train_config(config),
                             always_query=config.learner.always_query)
        learner = make_learner(lcfg, model.d, config.width, config.depth, seeds["net"])
    except (ValueError, np.linalg.LinAlgError) as exc:
        result.aborted = f"setup: {exc}"
        return result
    t_star = int(np.random.default_rng(seeds["snapshot"]).integers(1, config.T + 1)) if config.T else None
    result.t_star = t_star
    elog = ExperimentLog()
    snapshot, sq_queried, gammas, logdets = None, [], [], []
    result.negative_margins = 0
    try:
        for t, rec in enumerate(stream, start=1):
            if t == t_star:
                snapshot = learner.snapshot_classifier()
            point = AugmentedPoint(rec.x)
            dec = learner.observe(point)
            inc = elog.score(rec, dec.action, dec.query)
            result.negative_margins += int(dec.margin_hat < 0)
            if dec.query:
                sq_queried.append(dec.sqnorm)
                learner.update(point, dec, int(dec.action != rec.y))
            else:
                result.unqueried += 1
                result.unqueried_mistakes += int(dec.action != rec.a_star)
            gammas.append(learner.state.gamma)
            logdets.append(learner.state.logdetZ)
            if config.trace == "full":
                entry = learner.trace_record(t, dec)
                entry.update(_round_extra(rec, inc))
                result.trace.append(entry)
            result.curve.append((t, elog.regret, elog.queries))
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        result.aborted = f"round {len(result.curve) + 1}: {exc}"
    result.R_T, result.N_T = elog.regret, elog.queries
    result.logdetZ_T = learner.state.logdetZ
    result.elliptical_ok = elliptical_check_trace(sq_queried, learner.state.logdetZ)
    result.invariant_violations = (
        _check_monotone(gammas) + _check_monotone(logdets)
        + _check_monotone(elog.regret_curve) + _check_monotone(elog.query_curve)
        + sum(not ok for ok in result.elliptical_ok.values())
    )
    if snapshot is not None and config.holdout > 0:
        holdout = generate(model, noise, config.holdout, seeds["holdout"])
        result.excess_risk = excess_risk(snapshot.predict, holdout)
    return result


def run_modsel_trial(config: ExperimentConfig, trial: int, seed: int,
                     model: EnvironmentModel, noise: NoiseProfile) -> TrialResult:
    seeds = _child_seeds(seed)
    result = TrialResult(trial=trial, seed=seed)
    stream = generate(model, noise, config.T, seeds["stream"])
    T_grid = max(config.T, 2)
    variant = config.learner.variant
    pool = make_pool(T_grid, config.pool.M_bound_hint, config.delta, input_dim=model.d,
                     width=config.width, depth=config.depth, seed=seeds["net"], variant=variant,
                     train=_train_config(config), S_values=config.pool.S_values,
                     d_values=config.pool.d_values)
    mcfg = MetaConfig(delta=config.delta, gamma_exp=config.gamma_exp, horizon_T=max(config.T, 1),
                      d_constant=D_TEST_CONSTANT[variant])
    meta = MetaLearner(pool, mcfg, seed=seeds["sampler"])
    star = None
    if config.pool.track_well_specified and config.T:
        try:
            comp = stream_complexity(stream, config.depth)
            result.S_computed, result.L_H = comp["S"], comp["L_H"]
            star = well_specified_index(pool, comp["S"], comp["L_H"], config.delta)
        except np.linalg.LinAlgError as exc:
            log.warning("trial %d: complexity unavailable (%s)", trial, exc)
    t_star = int(np.random.default_rng(seeds["snapshot"]).integers(1, config.T + 1)) if config.T else None
    result.t_star = t_star
    elog = ExperimentLog()
    snapshot = None
    try:
        for t, rec in enumerate(stream, start=1):
            point = AugmentedPoint(rec.x)
            rnd = meta.step(point, lambda: rec.y, snapshot=(t == t_star))
            if rnd.snapshot is not None:
                snapshot = rnd.snapshot
            inc = elog.score(rec, rnd.action, rnd.query)
            if not rnd.query:
                result.unqueried += 1
                result.unqueried_mistakes += int(rnd.action != rec.a_star)
            if config.trace == "full":
                entry = rnd.to_record()
                entry.update(_round_extra(rec, inc))
                result.trace.append(entry)
            result.curve.append((t, elog.regret, elog.queries))
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        result.aborted = f"round {len(result.curve) + 1}: {exc}"
    result.R_T, result.N_T = elog.regret, elog.queries
    summary = meta.summary()
    result.extra = {
        "survivors": summary["survivors"], "epochs": summary["epochs"], "pool_size": summary["pool_size"],
        "well_specified": star,
        "well_specified_S": None if star is None else pool[star].S,
        "well_specified_survived": None if star is None else star in meta.state.active,
        "learners": summary["learners"] if config.trace == "full" else None,
    }
    if snapshot is not None and config.holdout > 0:
        holdout = generate(model, noise, config.holdout, seeds["holdout"])
        result.excess_risk = excess_risk(snapshot.predict, holdout)
    return result


def _write_trial(out: Path, kind: str, res: TrialResult, trace: bool) -> None:
    with open(out / f"curve_{kind}_trial{res.trial}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "R_t", "N_t"])
        for t, R, N in res.curve:
            w.writerow([t, repr(float(R)), N])
    if trace:
        with open(out / f"trace_{kind}_trial{res.trial}.jsonl", "w") as fh:
            for rec in res.trace:
                fh.write(json.dumps(rec, default=_json_default) + "\n")


def _run_batch(config: ExperimentConfig, kind: str, trial_fn) -> tuple[SummaryReport, list[TrialResult]]:
    if kind == "modsel" and config.env.kind == "margin_controlled" and config.gamma_exp > config.env.alpha:
        warnings.warn(f"gamma = {config.gamma_exp} exceeds the environment's alpha = {config.env.alpha}; "
                      "the model-selection guarantees assume gamma <= alpha", stacklevel=3)
    model, noise = build_environment(config.env, config.depth)
    start = time.perf_counter()
    seeds = config.trial_seeds()
    jobs = list(enumerate(seeds))
    if config.workers == 1:
        results = [trial_fn(config, k, s, model, noise) for k, s in jobs]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(lambda ks: trial_fn(config, ks[0], ks[1], model, noise), jobs))
    results.sort(key=lambda r: r.trial)
    report = SummaryReport(kind, config.to_dict(), [r.row() for r in results],
                           wall_clock=time.perf_counter() - start)
    if model.kind == "ntk_rkhs":
        report.config["env"]["achieved_S"] = model.achieved_S
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            _write_trial(out, kind, r, config.trace == "full")
        report.save(out / f"summary_{kind}.json")
    return report, results


def run_base(config: ExperimentConfig) -> SummaryReport:
    return _run_batch(config, "base", run_base_trial)[0]


def run_modsel(config: ExperimentConfig) -> SummaryReport:
    return _run_batch(config, "modsel", run_modsel_trial)[0]


def run_ntk(points, depth: int = 2, h=None, compute_lambda0: bool = True,
            include_H: bool = False) -> dict:
    """H statistics over a point set; S as well when ``h`` is given."""
    X = check_unit_norm(points, name="points")
    report = ntk_matrix(X, depth, compute_lambda0=compute_lambda0)
    out = report.to_dict()
    if include_H:
        out["H"] = report.H.tolist()
    if h is not None:
        out["S"] = complexity_S(h, report).S
    return out


def run_ntk_stream(stream: Stream, depth: int = 2) -> dict:
    """NTK statistics over the augmented points of a stream, S from its h values."""
    Z = flatten_augmented(stream.X)
    h = np.concatenate([stream.h_plus, 1.0 - stream.h_plus])
    return run_ntk(Z, depth, h)


def load_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def verify_trace(trace: list[dict], row: dict | None = None, curve: list | None = None) -> list[str]:
    """Recompute R_t, N_t and the trace invariants; returns a list of problems (empty if clean).

    Works for both base-learner and model-selection traces.
    """
    problems = []
    R, N = 0.0, 0
    recomputed = []
    for k, rec in enumerate(trace, start=1):
        if rec["t"] != k:
            problems.append(f"round index {rec['t']} at position {k}")
        inc = 2.0 * abs(rec["h_plus"] - 0.5) if rec["action"] != rec["a_star"] else 0.0
        if inc != rec["regret_inc"]:
            problems.append(f"t={k}: regret increment {rec['regret_inc']} != {inc}")
        R += inc
        N += int(rec.get("query", rec.get("queried")))
        recomputed.append((k, R, N))
    if row is not None and not row.get("aborted"):
        if R != row["R_T"]:
            problems.append(f"R_T {row['R_T']} != recomputed {R}")
        if N != row["N_T"]:
            problems.append(f"N_T {row['N_T']} != recomputed {N}")
    if curve is not None:
        for (t, Rc, Nc), (t2, R2, N2) in zip(curve, recomputed):
            if t != t2 or float(Rc) != R2 or int(Nc) != N2:
                problems.append(f"curve row t={t} disagrees with the trace")
                break
        if len(curve) != len(recomputed):
            problems.append("curve and trace lengths differ")
    if trace and "gamma" in trace[0]:
        g = [r["gamma"] for r in trace]
        ld = [r["logdetZ"] for r in trace]
        if _check_monotone(g):
            problems.append("gamma decreased")
        if _check_monotone(ld):
            problems.append("logdetZ decreased")
        sq = [r["sqnorm"] for r in trace if r["query"]]
        for b, ok in elliptical_check_trace(sq, ld[-1]).items():
            if not ok:
                problems.append(f"elliptical potential violated at b={b}")
    if trace and "active_set" in trace[0]:
        prev, epoch = None, 0
        for r in trace:
            cur = set(r["active_set"])
            if prev is not None and not cur <= prev:
                problems.append(f"t={r['t']}: active set grew")
            if r["eliminations"]:
                epoch += 1
            if r["epoch"] != epoch:
                problems.append(f"t={r['t']}: epoch {r['epoch']} != {epoch}")
            prev = cur
    return problems


def load_curve(path) -> list[tuple[int, float, int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(t), float(R), int(N)) for t, R, N in rows]


def verify_output_dir(path) -> dict[str, list[str]]:
    """Run :func:`verify_trace` over every trace in a run directory against its summary."""
    out = Path(path)
    problems: dict[str, list[str]] = {}
    for summary_path in sorted(out.glob("summary_*.json")):
        kind = summary_path.stem.split("_", 1)[1]
        report = SummaryReport.load(summary_path)
        for row in report.rows:
            tpath = out / f"trace_{kind}_trial{row['trial']}.jsonl"
            cpath = out / f"curve_{kind}_trial{row['trial']}.csv"
            if not tpath.exists():
                problems[str(tpath)] = ["missing trace (run with trace='full')"]
                continue
            curve = load_curve(cpath) if cpath.exists() else None
            problems[str(tpath)] = verify_trace(load_trace(tpath), row, curve)
    return problems


def summarize(paths) -> dict:
    """Aggregate one or more summary JSON files, recomputing aggregates from the rows."""
    out = {}
    for p in paths:
        report = SummaryReport.load(p)
        out[str(p)] = {"kind": report.kind, **report.aggregate()}
    return out
