import io

import numpy as np
import pytest

from ascrl import ccproto
from ascrl.ccserver import (CCServer, DuplicateApp, ServerConfig, TransitionMode, UnknownApp,
                            frm_clone)
from ascrl.featurize import MAX_THROUGHPUT, MIN_JITTER, MIN_LATENCY, SystemState
from ascrl.simcore import MSS
from ascrl.tinynn import BatchNorm, Dense, Mode, ShapeMismatch, deserialize, mlp, sub_network


def state(tput=1.0e6, rtt=0.12, cwnd=10, seed=0):
    r = np.random.default_rng(seed)
    return SystemState.from_values([100.0, cwnd * MSS, cwnd * MSS, 5, 5, 2 * MSS, 2 * MSS,
                                    rtt, rtt * r.uniform(0.9, 1.1), tput, tput * r.uniform(0.9, 1.1),
                                    0.1])


def head_layers(net):
    return [l for l in net.layers if isinstance(l, (Dense, BatchNorm))]


def trained_server(steps=80):
    srv = CCServer(seed=1)
    srv.register_app(1, MAX_THROUGHPUT)
    for i in range(steps):
        srv.on_state_report(1, state(1e6 + 1e4 * (i % 7), 0.11 + 0.001 * (i % 5), seed=i))
    return srv


class TestFrm:
    def test_clone_structure(self):
        rng = np.random.default_rng(0)
        src = sub_network(rng)
        src.forward(rng.normal(size=(16, 96)), Mode.TRAIN)
        clone = frm_clone(src, rng)
        s, c = head_layers(src), head_layers(clone)
        # FC1, BN1, FC2, BN2 copied bit for bit
        for a, b in zip(s[:4], c[:4]):
            for n in a.param_names + a.buffer_names:
                assert getattr(a, n).tobytes() == getattr(b, n).tobytes()
        assert s[-1].weight.shape == c[-1].weight.shape == (32, 1)
        assert not np.array_equal(s[-1].weight, c[-1].weight)

    def test_clone_is_independent(self):
        rng = np.random.default_rng(0)
        src = sub_network(rng)
        clone = frm_clone(src, rng)
        clone.layers[0].weight += 1
        assert not np.array_equal(src.layers[0].weight, clone.layers[0].weight)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            frm_clone(mlp([96, 8, 1], np.random.default_rng(0)), np.random.default_rng(1))

    def test_register_uses_most_trained_similar(self):
        srv = trained_server()
        srv.register_app(2, MIN_LATENCY)
        srv.register_app(3, MAX_THROUGHPUT)
        assert srv.app(3).cloned_from == 1
        assert srv.app(2).cloned_from is None
        a, b = head_layers(srv.app(1).actor.sub), head_layers(srv.app(3).actor.sub)
        assert np.array_equal(a[0].weight, b[0].weight) and np.array_equal(a[2].weight, b[2].weight)
        assert not np.array_equal(a[-1].weight, b[-1].weight)

    def test_change_objective_modes(self):
        srv = trained_server()
        srv.register_app(2, MIN_LATENCY, use_frm=False)
        srv.change_objective(2, MAX_THROUGHPUT, TransitionMode.FRM)
        assert srv.app(2).cloned_from == 1
        assert np.array_equal(srv.app(2).actor.sub.layers[0].weight, srv.app(1).actor.sub.layers[0].weight)
        assert len(srv.app(2).buffer) == 0
        srv.change_objective(2, MIN_JITTER, TransitionMode.FRM)
        assert srv.app(2).cloned_from is None  # no jitter app to copy from
        srv.change_objective(2, MAX_THROUGHPUT, TransitionMode.SCRATCH)
        assert srv.app(2).cloned_from is None
        assert not np.array_equal(srv.app(2).actor.sub.layers[0].weight,
                                  srv.app(1).actor.sub.layers[0].weight)
        assert srv.app(2).objective == MAX_THROUGHPUT


class TestRegistry:
    def test_duplicate_and_unknown(self):
        srv = CCServer()
        srv.register_app(1, MAX_THROUGHPUT)
        with pytest.raises(DuplicateApp):
            srv.register_app(1, MIN_LATENCY)
        with pytest.raises(UnknownApp):
            srv.on_state_report(9, state())
        with pytest.raises(UnknownApp):
            srv.deregister_app(9)

    def test_shared_trunk_bytes(self):
        srv = CCServer()
        b1 = srv.register_app(1, MAX_THROUGHPUT)
        b2 = srv.register_app(2, MIN_LATENCY)
        assert srv.central_bytes(b1) == srv.central_bytes(b2)
        assert b1.snapshot != b2.snapshot
        assert len(srv.registry) == 2
        srv.deregister_app(1)
        assert 1 not in srv and len(srv.registry) == 1

    def test_bundle_is_loadable(self):
        srv = CCServer()
        b = srv.register_app(1, MAX_THROUGHPUT)
        net = b.network()
        assert net.forward(np.zeros((1, 1, 12), dtype=np.float32)).shape == (1, 1)
        assert b.n_central_layers == len(srv.central.layers)

    def test_non_finite_report(self):
        srv = CCServer()
        srv.register_app(1, MAX_THROUGHPUT)
        bad = state().to_array()
        bad[3] = np.nan
        with pytest.raises(ValueError):
            srv.on_state_report(1, SystemState.from_values(bad))


class TestReports:
    def test_transitions_and_updates(self):
        srv = trained_server(80)
        rec = srv.app(1)
        assert len(rec.buffer) == 79 and len(rec.rewards) == 79
        assert rec.trained_steps == 80 - 64
        assert set(rec.rewards) <= {-1, 0, 1}

    def test_versions_increase(self):
        srv = CCServer()
        v0 = srv.register_app(1, MAX_THROUGHPUT).version
        v1 = srv.on_state_report(1, state()).version
        assert v1 > v0

    def test_deterministic_shipping(self):
        srv = CCServer(ServerConfig(explore=False))
        srv.register_app(1, MAX_THROUGHPUT)
        b = srv.on_state_report(1, state())
        x = srv.config.scales.transform(state().to_array()[None, :]).reshape(1, 1, 12)
        shipped = float(np.tanh(b.network().forward(x)[0, 0]))
        assert shipped == pytest.approx(srv.app(1).pending[1], abs=1e-5)

    def test_others_only_through_throughput(self):
        # app 1's reward sees the other apps only via their throughput shares
        def run(swap):
            srv = CCServer(seed=3)
            for a in (1, 2, 3):
                srv.register_app(a, MAX_THROUGHPUT, use_frm=False)
            tputs = [0.5e6, 0.9e6]
            if swap:
                tputs = tputs[::-1]
            srv.on_state_report(1, state(seed=1))
            srv.on_state_report(2, state(tputs[0], rtt=0.2 if swap else 0.11, cwnd=3))
            srv.on_state_report(3, state(tputs[1], rtt=0.15, cwnd=30 if swap else 7))
            srv.on_state_report(1, state(1.1e6, seed=2))
            return srv.app(1).rewards

        assert run(False) == run(True)


class TestBytePath:
    def test_handle_batch(self):
        srv = CCServer()
        srv.register_app(1, MAX_THROUGHPUT)
        srv.register_app(2, MIN_LATENCY)
        reply = srv.handle_batch(ccproto.encode_batch([(1, state()), (2, state())]))
        msgs = ccproto.decode_model_updates(reply)
        assert [m.app_id for m in msgs] == [1, 2]
        deserialize(msgs[0].snapshot, (1, 12))

    def test_serve_stream(self):
        srv = CCServer()
        srv.register_app(1, MAX_THROUGHPUT)
        req = b"".join(ccproto.frame(ccproto.FRAME_BATCH, ccproto.encode_batch([(1, state(seed=i))]))
                       for i in range(3))
        out = io.BytesIO()
        assert srv.serve(io.BytesIO(req), out) == 3
        out.seek(0)
        kinds = []
        while (fr := ccproto.read_frame(out)) is not None:
            kinds.append(fr[0])
            assert ccproto.decode_model_updates(fr[1])[0].app_id == 1
        assert kinds == [ccproto.FRAME_UPDATES] * 3

    def test_serve_rejects_wrong_kind(self):
        srv = CCServer()
        with pytest.raises(ccproto.ProtocolError):
            srv.serve(io.BytesIO(ccproto.frame(9, b"")), io.BytesIO())
