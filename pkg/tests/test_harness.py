import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ascrl.harness import scenarios
from ascrl.harness.cli import main
from ascrl.harness.config import ExperimentConfig, FlowConfig, dump_config, load_config
from ascrl.harness.emit import CSV_COLUMNS, csv_text, emit, interval_rows, read_csv
from ascrl.harness.experiment import run_experiment
from ascrl.harness.metrics import (AllZero, MetricsReport, TooFewSamples, adaptation_steps, cdf_points,
                                   convergence_step, five_number, jain_index, jitter_metric,
                                   moving_average)

from oracles import jain_oracle


class TestJain:
    def test_examples(self):
        assert jain_index([1, 1, 1, 1]) == 1.0
        assert jain_index([1, 0, 0, 0]) == 0.25
        assert jain_index([2, 1, 1]) == pytest.approx(16 / 18)

    def test_errors(self):
        with pytest.raises(AllZero):
            jain_index([0, 0])
        with pytest.raises(ValueError):
            jain_index([-1, 1])

    @given(st.lists(st.floats(0, 1e9), min_size=1, max_size=20))
    def test_bounds(self, xs):
        if not any(xs):
            return
        j = jain_index(xs)
        n = len(xs)
        assert 1 / n - 1e-12 <= j <= 1 + 1e-12
        assert j == pytest.approx(jain_oracle(xs), rel=1e-9)

    @given(st.floats(1e-3, 1e6), st.integers(1, 20))
    def test_equal_is_one(self, x, n):
        assert jain_index([x] * n) == pytest.approx(1.0)


class TestJitter:
    def test_example(self):
        assert jitter_metric([0.010, 0.012, 0.011]) == pytest.approx(0.0015)

    def test_constant(self):
        assert jitter_metric([0.1] * 5) == 0.0

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            jitter_metric([0.1])


class TestStats:
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_cdf_monotone(self, xs):
        pts = cdf_points(xs)
        vals, probs = zip(*pts)
        assert probs[0] == 0.0 and probs[-1] == 1.0
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert all(a <= b for a, b in zip(probs, probs[1:]))

    def test_five_number(self):
        f = five_number([1, 2, 3, 4, 5])
        assert (f["min"], f["median"], f["max"]) == (1, 3, 5)
        assert math.isnan(five_number([])["median"])

    def test_moving_average(self):
        assert np.allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])

    def test_convergence(self):
        x = np.concatenate([np.linspace(0, 1, 3000), np.ones(5000)])
        step = convergence_step(x, window=1000, tol=0.1)
        assert 2500 < step < 4000
        assert convergence_step(np.ones(100), window=10) == 0

    def test_adaptation(self):
        agg = np.concatenate([np.zeros(10), np.full(30, 1e6 * 1448 / 1500)])
        cap = np.full(40, 1e6)
        assert adaptation_steps(agg, cap, 0, window=1) == 10
        assert adaptation_steps(np.zeros(40), cap, 0) is None


def tiny_report(n_flows=2, steps=45):
    r = np.random.default_rng(0)
    return MetricsReport(
        flow_ids=list(range(n_flows)), app_ids=[i + 1 for i in range(n_flows)], cc=["fixed"] * n_flows,
        objectives=["throughput"] * n_flows, step_seconds=0.05,
        throughput=r.uniform(0, 1e6, (steps, n_flows)), srtt=r.uniform(0.1, 0.2, (steps, n_flows)),
        jitter=np.where(r.random((steps, n_flows)) < 0.3, np.nan, r.uniform(0, 0.01, (steps, n_flows))),
        losses=r.integers(0, 2, (steps, n_flows)).astype(float), cwnd=r.uniform(1e3, 1e5, (steps, n_flows)),
        capacity=np.full(steps, 2e6))


class TestEmit:
    def test_round_trip(self, tmp_path):
        rep = tiny_report()
        (path, _) = emit(rep, tmp_path, "t", interval=10)
        rows = read_csv(path)
        want = interval_rows(rep, 10)
        assert len(rows) == len(want) == 5 * 2
        for got, w in zip(rows, want):
            for k, v in zip(CSV_COLUMNS, w):
                if isinstance(v, float) and math.isnan(v):
                    assert math.isnan(got[k])
                else:
                    assert got[k] == v

    def test_empty_flows_header_only(self, tmp_path):
        rep = tiny_report(n_flows=0)
        (path, summary) = emit(rep, tmp_path, "empty")
        assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"
        assert summary.exists()

    def test_summary_fields(self, tmp_path):
        import json
        (_, s) = emit(tiny_report(), tmp_path, "s")
        d = json.loads(s.read_text())
        assert {"utilization", "jain", "flows", "aggregate_throughput"} <= set(d)
        f = d["flows"][0]
        assert set(f["throughput_bps"]["five_number"]) == {"min", "q1", "median", "q3", "max"}
        cdf = [p for _, p in f["throughput_bps"]["cdf"]]
        assert cdf[0] == 0.0 and cdf[-1] == 1.0

    def test_io_failure(self, tmp_path):
        from ascrl.harness.emit import IoFailure
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            emit(tiny_report(), blocker / "sub")


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = ExperimentConfig(flows=[FlowConfig(cc="newreno"), FlowConfig(objective="-latency")],
                               total_steps=500, bandwidth_schedule=[(0, 2e6), (100, 1e6)],
                               objective_transitions=[(50, 2, "throughput", "frm")], sac={"gamma": 0.9})
        dump_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    @pytest.mark.parametrize("bad", [{"total_steps": 0}, {"bandwidth_schedule": [(5, 1e6), (5, 2e6)]},
                                     {"updating_interval": 0}, {"sac": {"gamma": 2.0}}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"stpes": 4})


def small(flows, steps=300, **kw):
    return ExperimentConfig(flows=flows, total_steps=steps, stagger=0.5, **kw)


class TestRuns:
    def test_fixed_below_bdp(self):
        rep = run_experiment(small([FlowConfig(cc="fixed", fixed_cwnd_mss=4, on_duration=1e6, off_duration=0)],
                                   steps=400))
        sl = rep.window(start=100)
        want = 4 * 1448 * 8 / rep.base_rtt[0]
        assert rep.throughput[sl, 0].mean() == pytest.approx(want, rel=0.05)

    def test_capacity_bound(self):
        rep = run_experiment(small([FlowConfig(cc="newreno") for _ in range(3)], steps=400))
        agg = rep.aggregate_throughput() * 1500 / 1448
        one_packet = 1500 * 8 / rep.step_seconds
        assert np.all(agg <= rep.capacity + one_packet)

    def test_newreno_and_cubic_smoke(self):
        for cc in ("newreno", "cubic"):
            rep = run_experiment(small([FlowConfig(cc=cc) for _ in range(2)]))
            assert rep.utilization() > 0.3

    def test_deterministic_csv(self):
        cfg = small([FlowConfig(), FlowConfig(objective="-latency")], steps=200)
        assert csv_text(run_experiment(cfg)) == csv_text(run_experiment(cfg))

    def test_schedule_applied(self):
        cfg = small([FlowConfig(cc="newreno")], steps=100, bandwidth_schedule=[(0, 2e6), (50, 1e6)])
        rep = run_experiment(cfg)
        assert rep.capacity[49] == 2e6 and rep.capacity[50] == 1e6

    def test_transition_applied(self):
        cfg = small([FlowConfig(), FlowConfig(objective="-latency")], steps=120,
                    objective_transitions=[(60, 2, "throughput", "frm")])
        rep = run_experiment(cfg)
        (t,) = rep.extra["transitions"]
        assert t["step"] == 60 and t["cloned_from"] == 1

    def test_leaf_spine_runs(self):
        cfg = small([FlowConfig(cc="newreno") for _ in range(2)], steps=100, topology="leaf_spine")
        assert run_experiment(cfg).utilization() >= 0


class TestScenarios:
    def test_robustness_phases(self):
        base = ExperimentConfig(stagger=0.0)
        rep = scenarios.scenario_robustness(base, "fixed", phase_steps=200, n_flows=1, fixed_cwnd_mss=4,
                                            on_duration=1e6, off_duration=0.0)
        phases = rep.extra["phases"]
        assert [p["capacity_bps"] for p in phases] == [2e6, 1e6, 4e6, 1e6]
        # four packets per round trip stay below every phase's capacity
        for p in phases[1:]:
            sl = slice(p["start"] + 20, p["start"] + 200)
            rtt = rep.mean_srtt(sl)
            want = scenarios.fixed_phase_expectation(4, 1, rtt, p["capacity_bps"])
            assert rep.utilization(sl) == pytest.approx(want, rel=0.05)

    def test_frm_pair(self):
        out = scenarios.scenario_frm(ExperimentConfig(stagger=0.5), transition_step=80, window=80)
        assert out["frm"].extra["transitions"][0]["cloned_from"] == 1
        assert out["scratch"].extra["transitions"][0]["cloned_from"] is None
        assert math.isfinite(out["margin"])


def test_cli(tmp_path, capsys):
    assert main(["baseline", "--steps", "60", "--ccs", "newreno", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "baseline_newreno_s0.csv").exists()
    assert main(["objective", "--params", str(tmp_path / "missing.yaml")]) == 2
