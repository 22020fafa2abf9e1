"""Small numpy neural-network engine with hand-written backpropagation.

Layers take batched inputs: ``Conv1d`` expects ``(B, C, L)``, ``Dense`` and
``BatchNorm`` expect ``(B, F)``.  ``Network.forward`` caches what
``Network.backward`` needs; gradients accumulate into ``layer.grads``.

Snapshot format (all little-endian)::

    magic    4s   b"ASCN"
    version  u16
    n_layers u16
    layer*   u8 kind tag followed by a kind-specific record

    CONV1D      u16 in_ch, u16 out_ch, u16 kernel, u16 padding,
                f32[out_ch*in_ch*kernel] weight, f32[out_ch] bias
    DENSE       u32 in, u32 out, f32[in*out] weight (row-major in x out), f32[out] bias
    BATCHNORM   u32 dim, f32 momentum, f32 eps,
                f32[dim] gamma, f32[dim] beta, f32[dim] running_mean, f32[dim] running_var
    ACTIVATION  u8 kind (0 identity, 1 relu, 2 tanh)
    FLATTEN     (no payload)
"""

from __future__ import annotations

import math
import struct
from enum import IntEnum

import numpy as np

MAGIC = b"ASCN"
FORMAT_VERSION = 1
DTYPE = np.float32


class ShapeMismatch(ValueError):
    pass


class MissingForwardCache(RuntimeError):
    pass


class SnapshotError(ValueError):
    pass


class BadMagic(SnapshotError):
    pass


class VersionMismatch(SnapshotError):
    pass


class TruncatedPayload(SnapshotError):
    pass


class Mode(IntEnum):
    TRAIN = 0
    INFER = 1


class LayerKind(IntEnum):
    CONV1D = 1
    DENSE = 2
    BATCHNORM = 3
    ACTIVATION = 4
    FLATTEN = 5


class ActKind(IntEnum):
    IDENTITY = 0
    RELU = 1
    TANH = 2


def _kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _bias_uniform(rng, n, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(DTYPE)


class Layer:
    kind: LayerKind
    param_names: tuple = ()
    buffer_names: tuple = ()

    def __init__(self):
        self.grads = {}
        self._cache = None

    def zero_grad(self):
        for name in self.param_names:
            self.grads[name] = np.zeros_like(getattr(self, name))

    def params(self):
        return [(name, getattr(self, name)) for name in self.param_names]

    def astype(self, dtype):
        for name in self.param_names + self.buffer_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        self.zero_grad()
        return self

    def _need_cache(self):
        if self._cache is None:
            raise MissingForwardCache(f"{type(self).__name__}.backward before forward")
        return self._cache


class Conv1d(Layer):
    kind = LayerKind.CONV1D
    param_names = ("weight", "bias")

    def __init__(self, in_ch, out_ch, kernel, padding=None, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.padding = (kernel - 1) // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel
        self.weight = _kaiming_uniform(rng, (out_ch, in_ch, kernel), fan_in)
        self.bias = _bias_uniform(rng, out_ch, fan_in)
        self.zero_grad()

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.in_ch:
            raise ShapeMismatch(f"Conv1d expects {self.in_ch} channels, got {c}")
        return (self.out_ch, length + 2 * self.padding - self.kernel + 1)

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"Conv1d expects (B, {self.in_ch}, L), got {x.shape}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        # (B, C, Lout, k) -> (B, Lout, C*k)
        win = np.lib.stride_tricks.sliding_window_view(xp, self.kernel, axis=2)
        cols = win.transpose(0, 2, 1, 3).reshape(x.shape[0], win.shape[2], -1)
        wmat = self.weight.reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.bias
        self._cache = (cols, x.shape)
        return out.transpose(0, 2, 1)

    def backward(self, g):
        cols, xshape = self._need_cache()
        b, c, length = xshape
        gt = g.transpose(0, 2, 1)  # (B, Lout, out)
        wmat = self.weight.reshape(self.out_ch, -1)
        self.grads["weight"] += np.einsum("blo,blk->ok", gt, cols).reshape(self.weight.shape)
        self.grads["bias"] += gt.sum(axis=(0, 1))
        gcols = (gt @ wmat).reshape(b, -1, c, self.kernel)  # (B, Lout, C, k)
        p = self.padding
        gxp = np.zeros((b, c, length + 2 * p), dtype=g.dtype)
        lout = gcols.shape[1]
        for j in range(self.kernel):
            gxp[:, :, j:j + lout] += gcols[:, :, :, j].transpose(0, 2, 1)
        return gxp[:, :, p:p + length] if p else gxp


class Dense(Layer):
    kind = LayerKind.DENSE
    param_names = ("weight", "bias")

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _kaiming_uniform(rng, (n_in, n_out), n_in)
        self.bias = _bias_uniform(rng, n_out, n_in)
        self.zero_grad()

    def reinit(self, rng, scale: float = 1.0):
        self.weight = (scale * _kaiming_uniform(rng, (self.n_in, self.n_out), self.n_in)).astype(self.weight.dtype)
        self.bias = (scale * _bias_uniform(rng, self.n_out, self.n_in)).astype(self.bias.dtype)
        self.zero_grad()

    def out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeMismatch(f"Dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"Dense expects (B, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.weight + self.bias

    def backward(self, g):
        x = self._need_cache()
        self.grads["weight"] += x.T @ g
        self.grads["bias"] += g.sum(axis=0)
        return g @ self.weight.T


class BatchNorm(Layer):
    """Per-feature normalization.  TRAIN uses batch statistics (biased
    variance) and updates running averages; INFER uses the running ones."""

    kind = LayerKind.BATCHNORM
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        super().__init__()
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.gamma = np.ones(dim, dtype=DTYPE)
        self.beta = np.zeros(dim, dtype=DTYPE)
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)
        self.zero_grad()

    def out_shape(self, in_shape):
        if in_shape != (self.dim,):
            raise ShapeMismatch(f"BatchNorm expects ({self.dim},), got {in_shape}")
        return in_shape

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatch(f"BatchNorm expects (B, {self.dim}), got {x.shape}")
        if mode == Mode.TRAIN:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                n = x.shape[0]
                unbiased = var * n / max(n - 1, 1)
                self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, mode)
        return xhat * self.gamma + self.beta

    def backward(self, g):
        xhat, inv, mode = self._need_cache()
        self.grads["gamma"] += (g * xhat).sum(axis=0)
        self.grads["beta"] += g.sum(axis=0)
        gx = g * self.gamma
        if mode == Mode.INFER:
            return gx * inv
        n = g.shape[0]
        return inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))


class Activation(Layer):
    kind = LayerKind.ACTIVATION

    def __init__(self, act=ActKind.RELU):
        super().__init__()
        self.act = ActKind(act)

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        if self.act is ActKind.RELU:
            self._cache = x > 0
            return x * self._cache
        if self.act is ActKind.TANH:
            y = np.tanh(x)
            self._cache = y
            return y
        self._cache = True
        return x

    def backward(self, g):
        c = self._need_cache()
        if self.act is ActKind.RELU:
            return g * c
        if self.act is ActKind.TANH:
            return g * (1 - c * c)
        return g


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Network:
    """Sequential stack of layers."""

    def __init__(self, layers, input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        if self.input_shape is not None:
            shape = self.input_shape
            for layer in self.layers:
                shape = layer.out_shape(shape)
            self.output_shape = shape

    def forward(self, x, mode=Mode.INFER, update_stats=True):
        x = np.asarray(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"network expects (B, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, mode, update_stats)
        return x

    __call__ = forward

    def backward(self, g):
        """Accumulate parameter gradients; return the input gradient."""
        for layer in reversed(self.layers):
            if layer._cache is None:
                raise MissingForwardCache("backward before forward")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None

    def parameters(self):
        """List of parameter arrays (live references) in a fixed order."""
        return [getattr(l, n) for l in self.layers for n in l.param_names]

    def gradients(self):
        return [l.grads[n] for l in self.layers for n in l.param_names]

    def named_parameters(self):
        return [(f"{i}.{n}", getattr(l, n)) for i, l in enumerate(self.layers) for n in l.param_names]

    def set_parameters(self, arrays):
        it = iter(arrays)
        for l in self.layers:
            for n in l.param_names:
                setattr(l, n, next(it))

    def astype(self, dtype):
        for l in self.layers:
            l.astype(dtype)
        return self

    def copy(self) -> "Network":
        return deserialize(serialize(self))

    def state_arrays(self):
        """Parameters and buffers, for bit-level comparisons."""
        return [getattr(l, n) for l in self.layers for n in l.param_names + l.buffer_names]


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state: AdamState, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update of ``params``; returns them."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state must align")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


class Adam:
    def __init__(self, network_or_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self._net = network_or_params if isinstance(network_or_params, Network) else None
        params = self._params()if self._net is not None else list(network_or_params)
        self._static = None if self._net is not None else params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState(params)

    def _params(self):
        return self._net.parameters() if self._net is not None else self._static

    def step(self, grads=None):
        params = self._params()
        grads = grads if grads is not None else self._net.gradients()
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def serialize_layer(layer: Layer) -> bytes:
    out = [struct.pack("<B", int(layer.kind))]
    if isinstance(layer, Conv1d):
        out.append(struct.pack("<4H", layer.in_ch, layer.out_ch, layer.kernel, layer.padding))
        out += [_f32(layer.weight), _f32(layer.bias)]
    elif isinstance(layer, Dense):
        out.append(struct.pack("<2I", layer.n_in, layer.n_out))
        out += [_f32(layer.weight), _f32(layer.bias)]
    elif isinstance(layer, BatchNorm):
        out.append(struct.pack("<Iff", layer.dim, layer.momentum, layer.eps))
        out += [_f32(layer.gamma), _f32(layer.beta), _f32(layer.running_mean), _f32(layer.running_var)]
    elif isinstance(layer, Activation):
        out.append(struct.pack("<B", int(layer.act)))
    elif isinstance(layer, Flatten):
        pass
    else:
        raise TypeError(f"cannot serialize {type(layer).__name__}")
    return b"".join(out)


def serialize(network: Network) -> bytes:
    head = MAGIC + struct.pack("<HH", FORMAT_VERSION, len(network.layers))
    return head + b"".join(serialize_layer(l) for l in network.layers)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n, shape=None):
        a = np.frombuffer(self.take(4 * n), dtype="<f4").astype(DTYPE)
        return a.reshape(shape) if shape is not None else a


def _read_layer(r: _Reader) -> Layer:
    (tag,) = r.unpack("<B")
    try:
        kind = LayerKind(tag)
    except ValueError as exc:
        raise SnapshotError(f"unknown layer tag {tag}") from exc
    if kind is LayerKind.CONV1D:
        i, o, k, p = r.unpack("<4H")
        layer = Conv1d(i, o, k, p)
        layer.weight = r.floats(o * i * k, (o, i, k))
        layer.bias = r.floats(o)
    elif kind is LayerKind.DENSE:
        i, o = r.unpack("<2I")
        layer = Dense(i, o)
        layer.weight = r.floats(i * o, (i, o))
        layer.bias = r.floats(o)
    elif kind is LayerKind.BATCHNORM:
        d, mom, eps = r.unpack("<Iff")
        layer = BatchNorm(d, mom, eps)
        layer.momentum, layer.eps = mom, eps
        layer.gamma = r.floats(d)
        layer.beta = r.floats(d)
        layer.running_mean = r.floats(d)
        layer.running_var = r.floats(d)
    elif kind is LayerKind.ACTIVATION:
        (a,) = r.unpack("<B")
        layer = Activation(a)
    else:
        layer = Flatten()
    layer.zero_grad()
    return layer


def deserialize(data: bytes, input_shape=None) -> Network:
    r = _Reader(data)
    magic = bytes(r.take(4)) if len(data) >= 4 else None
    if magic != MAGIC:
        if len(data) < 4 and MAGIC.startswith(bytes(data)):
            raise TruncatedPayload("snapshot shorter than its header")
        raise BadMagic(f"bad magic {magic!r}")
    version, n = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"snapshot version {version}, expected {FORMAT_VERSION}")
    layers = [_read_layer(r) for _ in range(n)]
    if r.pos != len(r.data):
        raise SnapshotError(f"{len(r.data) - r.pos} trailing bytes after snapshot")
    return Network(layers, input_shape)


def layer_record_size(layer: Layer) -> int:
    """Encoded size in bytes of one layer record, from its shape alone."""
    if isinstance(layer, Conv1d):
        return 1 + 8 + 4 * (layer.out_ch * layer.in_ch * layer.kernel + layer.out_ch)
    if isinstance(layer, Dense):
        return 1 + 8 + 4 * (layer.n_in * layer.n_out + layer.n_out)
    if isinstance(layer, BatchNorm):
        return 1 + 12 + 4 * 4 * layer.dim
    if isinstance(layer, Activation):
        return 2
    return 1


HEADER_SIZE = 8


# --------------------------------------------------------------------------
# the ASC_RL actor layout
# --------------------------------------------------------------------------

STATE_DIM = 12


def central_layers(rng):
    """Shared feature extractor: two same-padded convolutions over the
    12x1 state, flattened to 96 features."""
    return [Conv1d(1, 4, 3, rng=rng), Activation(ActKind.RELU),
            Conv1d(4, 8, 3, rng=rng), Activation(ActKind.RELU), Flatten()]


def sub_layers(rng, n_out=1):
    """Per-app head: 96 -> 64 -> 32 -> 1 with batch norm after both hidden layers."""
    return [Dense(96, 64, rng), BatchNorm(64), Activation(ActKind.RELU),
            Dense(64, 32, rng), BatchNorm(32), Activation(ActKind.RELU),
            Dense(32, n_out, rng)]


def central_network(rng) -> Network:
    return Network(central_layers(rng), (1, STATE_DIM))


def sub_network(rng, out_scale: float = 1.0) -> Network:
    net = Network(sub_layers(rng), (96,))
    if out_scale != 1.0:
        net.layers[-1].reinit(rng, out_scale)
    return net


def mlp(sizes, rng, act=ActKind.RELU) -> Network:
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(Activation(act))
    return Network(layers, (sizes[0],))


# --------------------------------------------------------------------------
# finite-difference gradient check
# --------------------------------------------------------------------------


def _relu_masks(net):
    return [l._cache.copy() for l in net.layers
            if isinstance(l, Activation) and l.act is ActKind.RELU]


def gradient_check(net: Network, x, mode=Mode.TRAIN, eps=1e-3, rng=None, max_coords=None):
    """Compare backprop against central differences of ``sum(w * net(x))``.

    Uses the five-point central stencil (fourth order in ``eps``) in float64
    on a copy of ``net``.  Coordinates whose stencil crosses a ReLU kink are
    skipped and counted.  Returns ``(max_relative_error, n_checked, n_skipped)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    net = net.copy().astype(np.float64)
    for l in net.layers:
        for n in l.buffer_names:
            setattr(l, n, getattr(l, n).astype(np.float64))
    x = np.asarray(x, dtype=np.float64)
    out = net.forward(x, mode, update_stats=False)
    w = rng.normal(size=out.shape)
    net.zero_grad()
    net.forward(x, mode, update_stats=False)
    base_masks = _relu_masks(net)
    net.backward(w)
    grads = [g.copy() for g in net.gradients()]

    def probe():
        val = float((net.forward(x, mode, update_stats=False) * w).sum())
        return val, _relu_masks(net)

    worst, checked, skipped = 0.0, 0, 0
    for p, g in zip(net.parameters(), grads):
        flat, gf = p.reshape(-1), g.reshape(-1)
        idx = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = sorted(rng.choice(flat.size, max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            vals, kink = {}, False
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * eps
                vals[k], masks = probe()
                kink = kink or any((a != b).any() for a, b in zip(base_masks, masks))
            flat[i] = orig
            if kink:
                skipped += 1
                continue
            num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * eps)
            # absolute floor: exactly-zero gradients see only rounding noise
            denom = max(abs(num) + abs(gf[i]), 1e-6)
            worst = max(worst, abs(num - gf[i]) / denom)
            checked += 1
    return worst, checked, skipped


# --------------------------------------------------------------------------
# compiled inference
# --------------------------------------------------------------------------


def _conv_matrix(layer: Conv1d, length: int):
    """Dense (in_ch*L, out_ch*Lout) matrix equal to the convolution on
    channel-major flattened inputs."""
    _, lout = layer.out_shape((layer.in_ch, length))
    m = np.zeros((layer.in_ch * length, layer.out_ch * lout), dtype=np.float64)
    p = layer.padding
    for o in range(layer.out_ch):
        for t in range(lout):
            for c in range(layer.in_ch):
                for j in range(layer.kernel):
                    src = t + j - p
                    if 0 <= src < length:
                        m[c * length + src, o * lout + t] = layer.weight[o, c, j]
    return m, np.repeat(layer.bias.astype(np.float64), lout), lout


def compile_inference(net: Network):
    """Fold the network (INFER mode) into ``[(W, b, act), ...]`` affine stages.

    Convolutions become Toeplitz matrices and batch norm is merged into the
    preceding affine map.
    """
    if net.input_shape is None:
        raise ShapeMismatch("compile_inference needs a network with an input shape")
    shape = net.input_shape
    length = shape[-1]
    stages = []
    w = np.eye(int(np.prod(shape)))
    b = np.zeros(w.shape[1])
    for layer in net.layers:
        if isinstance(layer, Conv1d):
            m, cb, length = _conv_matrix(layer, length)
            w, b = w @ m, b @ m + cb
        elif isinstance(layer, Dense):
            wl = layer.weight.astype(np.float64)
            w, b = w @ wl, b @ wl + layer.bias
        elif isinstance(layer, BatchNorm):
            scale = layer.gamma / np.sqrt(layer.running_var.astype(np.float64) + layer.eps)
            w = w * scale
            b = (b - layer.running_mean) * scale + layer.beta
        elif isinstance(layer, Activation):
            if layer.act is not ActKind.IDENTITY:
                stages.append((w, b, layer.act))
                w = np.eye(w.shape[1])
                b = np.zeros(w.shape[1])
        elif isinstance(layer, Flatten):
            pass
        else:
            raise ShapeMismatch(f"cannot compile layer {type(layer).__name__}")
    stages.append((w, b, ActKind.IDENTITY))
    return [(w.astype(np.float32), b.astype(np.float32), act) for w, b, act in stages]


def run_compiled(stages, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float32).reshape(len(x), -1)
    for w, b, act in stages:
        h = h @ w + b
        if act is ActKind.RELU:
            h = np.maximum(h, 0.0)
        elif act is ActKind.TANH:
            h = np.tanh(h)
    return h
