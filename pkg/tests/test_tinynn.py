import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascrl.tinynn import (ActKind, Activation, Adam, BadMagic, BatchNorm, Conv1d, Dense, Flatten,
                          MissingForwardCache, Mode, Network, SnapshotError, TruncatedPayload,
                          VersionMismatch, central_network, compile_inference, deserialize,
                          gradient_check, layer_record_size, mlp, run_compiled, serialize,
                          serialize_layer, sub_network)

from oracles import forward_oracle

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


def actor_net(seed=0):
    r = rng(seed)
    return Network(central_network(r).layers + sub_network(r).layers, (1, 12))


def warm(net, x):
    # give batch-norm layers non-trivial running statistics
    for _ in range(5):
        net.forward(x, Mode.TRAIN)


class TestGradients:
    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFER])
    def test_dense(self, mode):
        net = Network([Dense(5, 3, rng())], (5,))
        assert gradient_check(net, rng(1).normal(size=(4, 5)), mode)[0] < TOL

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFER])
    def test_conv(self, mode):
        net = Network([Conv1d(2, 3, 3, rng=rng()), Flatten()], (2, 7))
        assert gradient_check(net, rng(1).normal(size=(4, 2, 7)), mode)[0] < TOL

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFER])
    def test_batchnorm(self, mode):
        bn = BatchNorm(4)
        bn.gamma = rng(2).normal(size=4).astype(np.float32)
        bn.beta = rng(3).normal(size=4).astype(np.float32)
        net = Network([Dense(3, 4, rng()), bn], (3,))
        x = rng(1).normal(size=(8, 3))
        warm(net, x)
        assert gradient_check(net, x, mode)[0] < TOL

    @pytest.mark.parametrize("act", [ActKind.RELU, ActKind.TANH])
    def test_activation(self, act):
        net = Network([Dense(4, 6, rng()), Activation(act), Dense(6, 2, rng(5))], (4,))
        err, checked, _ = gradient_check(net, rng(1).normal(size=(5, 4)))
        assert err < TOL and checked > 0

    @pytest.mark.parametrize("mode", [Mode.TRAIN, Mode.INFER])
    def test_composed_actor(self, mode):
        net = actor_net()
        x = rng(1).normal(size=(16, 1, 12))
        warm(net, x)
        err, checked, skipped = gradient_check(net, x, mode, max_coords=40)
        assert err < TOL
        assert checked > skipped

    def test_critic(self):
        net = mlp([13, 64, 64, 1], rng())
        err, checked, _ = gradient_check(net, rng(1).normal(size=(8, 13)), max_coords=40)
        assert err < TOL and checked > 0


class TestLayers:
    def test_batchnorm_train_stats(self):
        x = rng().normal(3.0, 2.0, size=(256, 5))
        y = BatchNorm(5).forward(x, Mode.TRAIN)
        assert np.allclose(y.mean(axis=0), 0, atol=1e-4)
        assert np.allclose(y.var(axis=0), 1, atol=1e-3)

    def test_batchnorm_running_update(self):
        bn = BatchNorm(2, momentum=0.5)
        bn.forward(np.array([[1.0, 2.0], [3.0, 6.0]]), Mode.TRAIN)
        assert np.allclose(bn.running_mean, [1.0, 2.0])

    def test_infer_does_not_touch_stats(self):
        bn = BatchNorm(3)
        bn.forward(rng().normal(size=(4, 3)), Mode.INFER)
        assert np.all(bn.running_mean == 0) and np.all(bn.running_var == 1)

    def test_kernel1_conv_is_dense(self):
        conv = Conv1d(3, 2, 1, rng=rng())
        dense = Dense(3, 2)
        dense.weight = conv.weight[:, :, 0].T.copy()
        dense.bias = conv.bias.copy()
        x = rng(1).normal(size=(4, 3, 1)).astype(np.float32)
        assert np.allclose(conv.forward(x)[:, :, 0], dense.forward(x[:, :, 0]), atol=1e-6)

    def test_same_padding_keeps_length(self):
        assert Conv1d(1, 4, 3).out_shape((1, 12)) == (4, 12)

    def test_central_width(self):
        out = central_network(rng()).forward(np.zeros((2, 1, 12), dtype=np.float32))
        assert out.shape == (2, 96)

    def test_backward_needs_forward(self):
        with pytest.raises(MissingForwardCache):
            Dense(2, 2, rng()).backward(np.ones((1, 2)))

    def test_adam_minimizes_quadratic(self):
        net = Network([Dense(1, 1, rng())], (1,))
        opt = Adam(net, lr=0.05)
        x = np.linspace(-1, 1, 32)[:, None]
        for _ in range(500):
            net.zero_grad()
            y = net.forward(x)
            net.backward(2 * (y - (3 * x + 1)) / len(x))
            opt.step()
        assert net.layers[0].weight[0, 0] == pytest.approx(3.0, abs=0.05)
        assert net.layers[0].bias[0] == pytest.approx(1.0, abs=0.05)


class TestForward:
    def test_matches_scalar_oracle(self):
        net = actor_net(3)
        x = rng(4).normal(size=(6, 1, 12)).astype(np.float32)
        warm(net, x)
        got = net.forward(x, Mode.INFER)
        for row, g in zip(x, got):
            assert np.allclose(g, forward_oracle(net.layers, row), rtol=1e-4, atol=1e-5)

    def test_compiled_matches_forward(self):
        net = actor_net(5)
        x = rng(6).normal(size=(10, 1, 12)).astype(np.float32)
        warm(net, x)
        assert np.allclose(run_compiled(compile_inference(net), x), net.forward(x), atol=1e-5)


class TestSerialization:
    def test_round_trip_bitwise(self):
        net = actor_net()
        warm(net, rng(1).normal(size=(8, 1, 12)))
        back = deserialize(serialize(net), (1, 12))
        for a, b in zip(net.state_arrays(), back.state_arrays()):
            assert a.tobytes() == b.tobytes()
        assert serialize(back) == serialize(net)

    def test_record_sizes(self):
        for layer in actor_net().layers:
            assert len(serialize_layer(layer)) == layer_record_size(layer)

    def test_bad_magic(self):
        with pytest.raises(BadMagic):
            deserialize(b"XXXX" + serialize(actor_net())[4:])

    def test_version(self):
        data = bytearray(serialize(actor_net()))
        data[4] = 99
        with pytest.raises(VersionMismatch):
            deserialize(bytes(data))

    def test_truncated(self):
        data = serialize(actor_net())
        for cut in (2, 10, len(data) // 2, len(data) - 1):
            with pytest.raises(TruncatedPayload):
                deserialize(data[:cut])

    def test_trailing(self):
        with pytest.raises(SnapshotError):
            deserialize(serialize(actor_net()) + b"\0")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_round_trip_property(self, n_in, n_out, seed):
        net = Network([Dense(n_in, n_out, rng(seed)), Activation(ActKind.TANH)], (n_in,))
        back = deserialize(serialize(net), (n_in,))
        x = rng(seed + 1).normal(size=(3, n_in)).astype(np.float32)
        assert np.array_equal(net.forward(x), back.forward(x))
