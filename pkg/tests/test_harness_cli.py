import json
import math

import numpy as np
import pytest

from ntk_selective.cli import main
from ntk_selective.harness import (
    ExperimentConfig,
    SummaryReport,
    load_curve,
    load_trace,
    run_base,
    run_modsel,
    run_ntk,
    verify_output_dir,
    verify_trace,
)
from ntk_selective.ntk import d_diagnostic

from conftest import unit_rows


def small(**kw):
    base = dict(T=120, trials=2, width=8, delta=0.1, holdout=200, env=dict(kind="linear", d=3))
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = small(learner=dict(S=2.0))
        cfg.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == cfg

    def test_version_mismatch(self):
        with pytest.raises(ValueError, match="version"):
            ExperimentConfig(version=99)

    @pytest.mark.parametrize("kw", [dict(T=-1), dict(trials=0), dict(delta=1.5), dict(trace="all"),
                                    dict(trials=2, seeds=[1]), dict(learner=dict(S=-1.0))])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_seed_expansion(self):
        a = ExperimentConfig(trials=5, seed=3).trial_seeds()
        assert a == ExperimentConfig(trials=5, seed=3).trial_seeds() and len(set(a)) == 5
        assert ExperimentConfig(trials=2, seeds=[7, 8]).trial_seeds() == [7, 8]


class TestRunBase:
    def test_empty_horizon(self):
        rep = run_base(small(T=0))
        for row in rep.rows:
            assert row["R_T"] == 0 and row["N_T"] == 0 and row["excess_risk"] is None

    def test_always_query(self):
        rep = run_base(small(learner=dict(always_query=True)))
        assert all(r["N_T"] == 120 and r["unqueried"] == 0 for r in rep.rows)

    def test_worker_independence(self):
        a = run_base(small(trials=4, workers=1)).rows
        b = run_base(small(trials=4, workers=3)).rows
        assert a == b

    def test_invariants_and_aggregates(self):
        rep = run_base(small(trials=3))
        agg = rep.aggregate()
        assert agg["invariant_violations"] == 0 and agg["trials"] == 3
        assert agg["R_T"]["mean"] == pytest.approx(np.mean([r["R_T"] for r in rep.rows]))
        for r in rep.rows:
            assert r["S_used"] == pytest.approx(2 * math.sqrt(2) * r["S_computed"])
            assert all(r["elliptical_ok"].values())

    def test_nonfrozen(self):
        rep = run_base(small(T=40, trials=1, learner=dict(variant="nonfrozen", J=5)))
        assert rep.rows[0]["aborted"] is None and rep.rows[0]["invariant_violations"] == 0


class TestOutputs:
    def test_files_and_verification(self, tmp_path):
        run_base(small(output_dir=str(tmp_path)))
        run_modsel(small(output_dir=str(tmp_path), T=80))
        problems = verify_output_dir(tmp_path)
        assert len(problems) == 4 and all(v == [] for v in problems.values())
        curve = load_curve(tmp_path / "curve_base_trial0.csv")
        assert curve[0][0] == 1 and len(curve) == 120
        summary = SummaryReport.load(tmp_path / "summary_base.json")
        assert summary.rows[0]["R_T"] == curve[-1][1]

    def test_tampering_detected(self, tmp_path):
        run_base(small(output_dir=str(tmp_path), trials=1))
        path = tmp_path / "trace_base_trial0.jsonl"
        trace = load_trace(path)
        row = SummaryReport.load(tmp_path / "summary_base.json").rows[0]
        assert verify_trace(trace, row) == []
        k = 5
        trace[k]["action"] = -trace[k]["action"]
        assert verify_trace(trace, row)
        trace[k]["action"] = -trace[k]["action"]
        trace[-1]["gamma"] = -1.0
        assert "gamma decreased" in verify_trace(trace)


class TestRunModsel:
    def test_single_learner_pool_matches_base(self):
        S = 2.0
        base = run_base(small(learner=dict(S=S), trace="full"))
        pool = dict(S_values=[S], d_values=[1e12], track_well_specified=False)
        mod = run_modsel(small(pool=pool, trace="full"))
        for rb, rm in zip(base.rows, mod.rows):
            for key in ("R_T", "N_T", "excess_risk", "t_star", "unqueried", "unqueried_mistakes"):
                assert rb[key] == rm[key], key
            assert rm["survivors"] == [0]

    def test_well_specified_tracking(self):
        rep = run_modsel(small(T=150, trials=1))
        row = rep.rows[0]
        assert row["well_specified"] is not None
        assert row["well_specified_survived"] == (row["well_specified"] in row["survivors"])

    def test_tiny_S_learner_eliminated(self):
        """On an env whose h has S near the top of its range, a learner with S = 1/64 is
        eliminated before T in >= 90% of trials."""
        env = dict(kind="ntk_rkhs", d=3, n_points=12, target_S=3.9)
        cfg = ExperimentConfig(env=env, T=2000, trials=10, width=8, delta=0.05, holdout=0,
                               trace="summary", pool=dict(S_values=[1 / 64, 16.0], d_values=[1e6],
                                                          track_well_specified=False))
        rows = run_modsel(cfg).rows
        eliminated = sum(0 not in r["survivors"] for r in rows)
        assert eliminated >= 9


class TestNtk:
    def test_orthogonal_pair(self):
        out = run_ntk(np.eye(2), depth=2, include_H=True)
        np.testing.assert_allclose(out["H"], [[1.5, 1 / math.pi], [1 / math.pi, 1.5]], atol=1e-12)

    def test_with_h(self, rng):
        X = unit_rows(rng, 6, 3)
        out = run_ntk(X, 2, h=np.full(6, 0.5))
        assert out["S"] > 0


class TestCli:
    def test_ntk_from_points(self, tmp_path, capsys):
        pts = tmp_path / "p.csv"
        pts.write_text("x0,x1,h\n1.0,0.0,0.5\n0.0,1.0,0.5\n")
        assert main(["ntk", "--points", str(pts), "--with-H", "--output-dir", str(tmp_path)]) == 0
        out = json.loads((tmp_path / "ntk.json").read_text())
        assert out["H"][0][1] == pytest.approx(1 / math.pi)
        assert "S" in out

    def test_ntk_from_env(self, capsys):
        assert main(["ntk", "--env", "linear", "--d", "3", "-T", "10"]) == 0
        assert "L_H" in json.loads(capsys.readouterr().out)

    def test_datagen_round_trip(self, tmp_path):
        assert main(["datagen", "--env", "margin_controlled", "--d", "2", "--alpha", "inf",
                     "--eps0", "0.2", "-T", "50", "--output-dir", str(tmp_path)]) == 0
        from ntk_selective.environment import Stream
        s = Stream.from_csv(tmp_path / "stream.csv")
        assert len(s) == 50
        np.testing.assert_allclose(np.abs(s.margin), 0.2)

    def test_run_verify_summarize(self, tmp_path, capsys):
        out = str(tmp_path)
        common = ["--seed", "1", "-T", "60", "-m", "8", "-n", "2", "--delta", "0.1", "--d", "3",
                  "--trials", "2", "--output-dir", out]
        assert main(["run-base", *common, "--S", "auto"]) == 0
        assert main(["run-modsel", *common, "--gamma", "1"]) == 0
        capsys.readouterr()
        assert main(["verify-trace", out]) == 0
        assert "FAIL" not in capsys.readouterr().out
        assert main(["summarize", str(tmp_path / "summary_base.json")]) == 0
        agg = json.loads(capsys.readouterr().out)
        assert agg[str(tmp_path / "summary_base.json")]["trials"] == 2
        curve = (tmp_path / "curve_modsel_trial1.csv").read_text().splitlines()
        assert curve[0] == "t,R_t,N_t" and len(curve) == 61

    def test_config_file_with_override(self, tmp_path, capsys):
        cfg = small(trials=1, T=30)
        cfg.save(tmp_path / "c.json")
        assert main(["run-base", "--config", str(tmp_path / "c.json"), "-T", "20"]) == 0
        assert json.loads(capsys.readouterr().out)["config"]["T"] == 20

    def test_verify_trace_detects_tampering(self, tmp_path, capsys):
        out = str(tmp_path)
        main(["run-base", "-T", "30", "-m", "8", "--d", "3", "--output-dir", out])
        path = tmp_path / "trace_base_trial0.jsonl"
        lines = path.read_text().splitlines()
        rec = json.loads(lines[3])
        rec["query"] = not rec["query"]
        lines[3] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        assert main(["verify-trace", out]) == 1
        assert main(["verify-trace", str(tmp_path / "nothing")]) == 1
