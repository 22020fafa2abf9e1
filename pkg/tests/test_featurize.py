import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascrl.featurize import (MAX_THROUGHPUT, MIN_JITTER, MIN_LATENCY, STATE_FIELDS, EmptyHistory,
                             EwmaParams, FeatureScales, Metric, Normalization, Objective, SystemState,
                             collect_state, ewma, objective_value, record_step)
from ascrl.simcore import MSS, seconds
from ascrl.transport import CCKind, Flow

from oracles import ewma_oracle

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
histories = st.lists(finite, min_size=1, max_size=30)
zetas = st.floats(min_value=0.01, max_value=0.99)


class TestEwma:
    def test_hand_value(self):
        assert ewma([4, 2, 1], 0.5) == pytest.approx(3.0)

    def test_constant(self):
        assert ewma([7.5] * 11, 0.3) == pytest.approx(7.5)

    def test_single(self):
        assert ewma([42.0], 0.9) == 42.0

    def test_empty(self):
        with pytest.raises(EmptyHistory):
            ewma([], 0.9)

    def test_window(self):
        # only history[0..K] participates
        assert ewma([1.0, 1.0, 100.0], 0.5, K=1) == 1.0

    @given(histories, zetas, st.integers(1, 20))
    def test_matches_direct_sum(self, h, z, K):
        got = ewma(h, z, K)
        want = ewma_oracle(h, z, K)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    @given(histories, zetas)
    def test_bounded(self, h, z):
        v = ewma(h, z, 10)
        w = h[:11]
        assert min(w) - 1e-9 * max(1, abs(min(w))) <= v <= max(w) + 1e-9 * max(1, abs(max(w)))

    @given(histories, zetas, st.floats(min_value=-100, max_value=100))
    def test_scale_equivariant(self, h, z, c):
        assert ewma([c * x for x in h], z, 10) == pytest.approx(c * ewma(h, z, 10), rel=1e-9, abs=1e-6)

    def test_params(self):
        with pytest.raises(ValueError):
            EwmaParams(zeta=1.0)
        with pytest.raises(ValueError):
            EwmaParams(K=0)


class TestObjective:
    def test_throughput_half(self):
        o = objective_value({"throughput": 1e6}, MAX_THROUGHPUT, Normalization(ref_bandwidth=2e6))
        assert o == pytest.approx(0.5)

    def test_zero_latency(self):
        assert objective_value({"latency": 0.0}, MIN_LATENCY) == 0.0

    def test_composite(self):
        obj = Objective.parse("1*throughput+-1*latency")
        norm = Normalization(ref_bandwidth=2e6, ref_rtt=0.1)
        assert objective_value({Metric.THROUGHPUT: 1e6, Metric.LATENCY: 0.05}, obj, norm) == pytest.approx(0.0)

    def test_needs_terms(self):
        with pytest.raises(ValueError):
            Objective(())

    def test_parse_and_codes(self):
        assert Objective.parse("throughput") == MAX_THROUGHPUT
        assert Objective.parse("-latency") == MIN_LATENCY
        assert [o.code for o in (MAX_THROUGHPUT, MIN_LATENCY, MIN_JITTER)] == [1, 2, 3]
        custom = Objective.parse("0.5*throughput+-0.5*jitter")
        assert custom.code == Objective.parse("-0.5*jitter+0.5*throughput").code
        assert 5 <= custom.code < 21

    @given(st.floats(min_value=0, max_value=1e9), st.floats(min_value=0, max_value=10),
           st.floats(min_value=0, max_value=10))
    def test_minimize_nonpositive(self, tput, lat, jit):
        m = {"throughput": tput, "latency": lat, "jitter": jit, "loss": 0.1}
        for obj in (MIN_LATENCY, MIN_JITTER, Objective.parse("-latency+-jitter")):
            assert objective_value(m, obj) <= 0.0


def scripted_flow(steps):
    f = Flow(0, 1, "s0", "r0", CCKind.FIXED, cwnd=4 * MSS)
    for cwnd, acked, srtt in steps:
        f.cwnd = cwnd
        f.srtt = srtt
        f.step.acked_bytes = acked * MSS
        f.step.acked_segments = acked
        record_step(f, 0.05)
        f.step.reset()
    return f


class TestCollect:
    def test_first_step(self):
        f = scripted_flow([(4 * MSS, 3, 0.1)])
        s = collect_state(f, seconds(0.05), EwmaParams(), MAX_THROUGHPUT)
        assert s.cwnd == s.cwnd_ewma
        assert s.acked_segments == s.acked_ewma == 3
        assert s.throughput == s.throughput_ewma == pytest.approx(3 * MSS * 8 / 0.05)

    def test_idle_step(self):
        f = scripted_flow([(4 * MSS, 0, 0.1)])
        s = collect_state(f, seconds(1), EwmaParams(), MAX_THROUGHPUT)
        assert s.acked_segments == 0 and s.throughput == 0 and s.cwnd == 4 * MSS

    def test_three_step_oracle(self):
        steps = [(2 * MSS, 1, 0.12), (4 * MSS, 2, 0.11), (8 * MSS, 5, 0.13)]
        f = scripted_flow(steps)
        p = EwmaParams(zeta=0.7, K=10)
        s = collect_state(f, seconds(0.15), p, MIN_LATENCY)
        rev = steps[::-1]
        assert s.cwnd_ewma == pytest.approx(ewma_oracle([c for c, _, _ in rev], 0.7, 10))
        assert s.acked_ewma == pytest.approx(ewma_oracle([a for _, a, _ in rev], 0.7, 10))
        assert s.rtt_ewma == pytest.approx(ewma_oracle([r for _, _, r in rev], 0.7, 10))
        tputs = [a * MSS * 8 / 0.05 for _, a, _ in rev]
        assert s.throughput_ewma == pytest.approx(ewma_oracle(tputs, 0.7, 10))
        assert s.objective_code == pytest.approx(0.2)

    def test_pure(self):
        f = scripted_flow([(2 * MSS, 1, 0.12), (4 * MSS, 2, 0.11)])
        a = collect_state(f, seconds(3), EwmaParams(), MAX_THROUGHPUT)
        b = collect_state(f, seconds(3), EwmaParams(), MAX_THROUGHPUT)
        assert a == b

    def test_no_history(self):
        f = Flow(0, 1, "s0", "r0", CCKind.FIXED)
        f.history = type("H", (), {"steps": 0})()
        with pytest.raises(EmptyHistory):
            collect_state(f, 0, EwmaParams(), MAX_THROUGHPUT)

    def test_timestamp_wraps(self):
        f = scripted_flow([(2 * MSS, 1, 0.1)])
        s = collect_state(f, seconds(86400 + 5), EwmaParams(), MAX_THROUGHPUT)
        assert s.timestamp == pytest.approx(5.0)


def test_state_shape():
    s = SystemState.from_values(range(12))
    assert len(STATE_FIELDS) == 12
    assert s.as_column().shape == (12, 1)
    assert SystemState.from_values(s.as_column().ravel()) == s
    with pytest.raises(ValueError):
        SystemState.from_values(range(11))


def test_feature_scales_finite():
    v = np.array([[3600, 10 * MSS, 9 * MSS, 5, 4.5, 9 * MSS, 8 * MSS, 0.15, 0.14, 1.9e6, 1.8e6, 0.1]])
    out = FeatureScales().transform(v)
    assert out.shape == (1, 12) and np.all(np.isfinite(out)) and np.all(np.abs(out) < 5)
