"""A fixed-architecture network engine with hand-written backward passes.

Every network owns one flat parameter vector and one flat gradient vector of
the same length; layers hold views into them. ``forward`` returns a tape
that ``backward`` consumes, so a network can be applied several times
before any gradient is taken.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LN_EPS = 1e-5


class TrainingDivergence(Exception):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class IncompatibleCheckpoint(Exception):
    pass


class CorruptCheckpoint(Exception):
    pass


# ---------------------------------------------------------------- layers

class Layer:
    n_params = 0

    def bind(self, params, grads):
        pass

    def init(self, rng):
        pass

    def out_shape(self, in_shape):
        return in_shape

    def spec(self) -> dict:
        return {"type": type(self).__name__}


class Dense(Layer):
    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.n_params = self.n_in * self.n_out + self.n_out

    def bind(self, params, grads):
        k = self.n_in * self.n_out
        self.W = params[:k].reshape(self.n_in, self.n_out)
        self.b = params[k:]
        self.dW = grads[:k].reshape(self.n_in, self.n_out)
        self.db = grads[k:]

    def init(self, rng):
        bound = np.sqrt(1.0 / self.n_in)
        self.W[...] = rng.uniform(-bound, bound, self.W.shape)
        self.b[...] = rng.uniform(-bound, bound, self.b.shape)

    def out_shape(self, in_shape):
        return (self.n_out,)

    def forward(self, x):
        return x @ self.W + self.b, x

    def backward(self, x, dy, param_grads=True):
        if param_grads:
            self.dW += x.T @ dy
            self.db += dy.sum(axis=0)
        return dy @ self.W.T

    def spec(self):
        return {"type": "Dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """Cross-correlation over NCHW input with zero padding."""

    def __init__(self, c_in, c_out, kernel, stride, pad):
        self.c_in, self.c_out, self.k, self.s, self.p = map(int, (c_in, c_out, kernel, stride, pad))
        self.n_params = self.c_out * self.c_in * self.k * self.k + self.c_out

    def bind(self, params, grads):
        n = self.c_out * self.c_in * self.k * self.k
        self.W = params[:n].reshape(self.c_out, self.c_in * self.k * self.k)
        self.b = params[n:]
        self.dW = grads[:n].reshape(self.W.shape)
        self.db = grads[n:]

    def init(self, rng):
        bound = np.sqrt(1.0 / (self.c_in * self.k * self.k))
        self.W[...] = rng.uniform(-bound, bound, self.W.shape)
        self.b[...] = rng.uniform(-bound, bound, self.b.shape)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {c}")
        ho = (h + 2 * self.p - self.k) // self.s + 1
        wo = (w + 2 * self.p - self.k) // self.s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {self.k}")
        return (self.c_out, ho, wo)

    def forward(self, x):
        N, C, H, W = x.shape
        _, ho, wo = self.out_shape((C, H, W))
        p, k, s = self.p, self.k, self.s
        xp = np.pad(x, [(0, 0), (0, 0), (p, p), (p, p)]) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * ho * wo, C * k * k)
        y = cols @ self.W.T + self.b
        return y.reshape(N, ho, wo, self.c_out).transpose(0, 3, 1, 2), (cols, x.shape, ho, wo)

    def backward(self, cache, dy, param_grads=True):
        cols, (N, C, H, W), ho, wo = cache
        dyr = dy.transpose(0, 2, 3, 1).reshape(N * ho * wo, self.c_out)
        if param_grads:
            self.dW += dyr.T @ cols
            self.db += dyr.sum(axis=0)
        p, k, s = self.p, self.k, self.s
        dcols = (dyr @ self.W).reshape(N, ho, wo, C, k, k)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp

    def spec(self):
        return {"type": "Conv2d", "c_in": self.c_in, "c_out": self.c_out, "kernel": self.k,
                "stride": self.s, "pad": self.p}


class LayerNorm(Layer):
    """Normalizes over all non-batch axes; gain/bias per feature (dense) or per channel (conv)."""

    def __init__(self, shape):
        self.shape = tuple(int(d) for d in shape)
        self.affine = self.shape if len(self.shape) == 1 else (self.shape[0],) + (1,) * (len(self.shape) - 1)
        self.n_params = 2 * int(np.prod(self.affine))

    def bind(self, params, grads):
        n = self.n_params // 2
        self.g, self.b = params[:n].reshape(self.affine), params[n:].reshape(self.affine)
        self.dg, self.db = grads[:n].reshape(self.affine), grads[n:].reshape(self.affine)

    def init(self, rng):
        self.g[...] = 1.0
        self.b[...] = 0.0

    def forward(self, x):
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True, dtype=np.float64)
        inv = (1.0 / np.sqrt(var + LN_EPS)).astype(x.dtype)
        xhat = xc * inv
        return xhat * self.g + self.b, (xhat, inv)

    def backward(self, cache, dy, param_grads=True):
        xhat, inv = cache
        if param_grads:
            red = (0,) + tuple(i + 1 for i, d in enumerate(self.affine) if d == 1)
            self.dg += (dy * xhat).sum(axis=red, dtype=np.float64).reshape(self.affine)
            self.db += dy.sum(axis=red, dtype=np.float64).reshape(self.affine)
        axes = tuple(range(1, dy.ndim))
        dxhat = dy * self.g
        m1 = dxhat.mean(axis=axes, keepdims=True, dtype=np.float64).astype(dy.dtype)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(dy.dtype)
        return (dxhat - m1 - xhat * m2) * inv

    def spec(self):
        return {"type": "LayerNorm", "shape": list(self.shape)}


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy, param_grads=True):
        return dy * mask


class Flatten(Layer):
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, shape, dy, param_grads=True):
        return dy.reshape(shape)


class ConcatExtra(Layer):
    """Appends a second network input (e.g. the action) to the features."""

    def __init__(self, n_extra):
        self.n_extra = int(n_extra)

    def out_shape(self, in_shape):
        return (in_shape[0] + self.n_extra,)

    def spec(self):
        return {"type": "ConcatExtra", "n_extra": self.n_extra}


LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2d, LayerNorm, ReLU, Flatten, ConcatExtra)}


def layer_from_spec(spec):
    kw = {k: v for k, v in spec.items() if k != "type"}
    return LAYER_TYPES[spec["type"]](**kw)


# ---------------------------------------------------------------- network

class Network:
    def __init__(self, layers, input_shape, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape
        self.extra_dim = sum(l.n_extra for l in self.layers if isinstance(l, ConcatExtra))
        n = sum(l.n_params for l in self.layers)
        self.params = np.zeros(n, dtype=self.dtype)
        self.grads = np.zeros(n, dtype=self.dtype)
        self._bind()

    def _bind(self):
        off = 0
        for layer in self.layers:
            layer.bind(self.params[off:off + layer.n_params], self.grads[off:off + layer.n_params])
            off += layer.n_params

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    def dense_layers(self):
        return [l for l in self.layers if isinstance(l, Dense)]

    def zero_grad(self):
        self.grads[...] = 0.0

    def initialize(self, rng, final_range: float):
        for layer in self.layers:
            layer.init(rng)
        cold_init(self, final_range, rng)

    def _check_input(self, x, extra):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"network expects input shape {self.input_shape}, got {x.shape[1:]}")
        if self.extra_dim:
            if extra is None:
                raise ValueError("network needs an extra input")
            extra = np.asarray(extra, dtype=self.dtype).reshape(len(x), -1)
            if extra.shape[1] != self.extra_dim:
                raise ValueError(f"extra input must have {self.extra_dim} columns, got {extra.shape[1]}")
        return x, extra

    def forward(self, x, extra=None):
        """Returns (output, tape)."""
        x, extra = self._check_input(x, extra)
        tape = []
        for layer in self.layers:
            if isinstance(layer, ConcatExtra):
                tape.append(x.shape[1])
                x = np.concatenate([x, extra], axis=1)
            else:
                x, cache = layer.forward(x)
                tape.append(cache)
        return x, tape

    def __call__(self, x, extra=None):
        x, extra = self._check_input(x, extra)
        for layer in self.layers:
            if isinstance(layer, ConcatExtra):
                x = np.concatenate([x, extra], axis=1)
            else:
                x = layer.forward(x)[0]
        return x

    def backward(self, tape, dout, param_grads=True):
        """Accumulates parameter gradients; returns (d_input, d_extra)."""
        dy = np.asarray(dout, dtype=self.dtype)
        if dy.shape[1:] != self.output_shape or len(tape) != len(self.layers):
            raise ValueError(f"upstream gradient shape {dy.shape[1:]} does not match output {self.output_shape}")
        dextra = None
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            if isinstance(layer, ConcatExtra):
                dy, dextra = dy[:, :cache], dy[:, cache:]
            else:
                dy = layer.backward(cache, dy, param_grads)
        return dy, dextra

    def descriptor(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.spec() for l in self.layers]}

    @classmethod
    def from_descriptor(cls, desc, dtype=np.float32):
        return cls([layer_from_spec(s) for s in desc["layers"]], desc["input_shape"], dtype)

    def copy(self, dtype=None):
        net = Network.from_descriptor(self.descriptor(), dtype or self.dtype)
        net.params[...] = self.params
        return net


def mlp_layers(n_in, width, depth, n_out, use_layer_norm=True):
    layers, d = [], n_in
    for _ in range(depth):
        layers.append(Dense(d, width))
        if use_layer_norm:
            layers.append(LayerNorm((width,)))
        layers.append(ReLU())
        d = width
    layers.append(Dense(d, n_out))
    return layers


CNN3 = ((8, 32, 4, 2), (4, 64, 2, 1), (3, 64, 1, 1))  # kernel, channels, stride, pad


def cnn3_layers(input_shape, use_layer_norm=True):
    layers, shape = [], tuple(input_shape)
    for k, c, s, p in CNN3:
        conv = Conv2d(shape[0], c, k, s, p)
        shape = conv.out_shape(shape)
        layers.append(conv)
        if use_layer_norm:
            layers.append(LayerNorm(shape))
        layers.append(ReLU())
    layers.append(Flatten())
    return layers


def build_encoder(input_shape, repr_dim=16, width=1024, depth=4, extra_dim=0, arch=None,
                  use_layer_norm=True, rng=None, init_range=1e-12, dtype=np.float32) -> Network:
    """[cnn3 ->] [concat extra ->] MLP with layer norm before every ReLU."""
    input_shape = tuple(input_shape)
    if arch is None:
        arch = "cnn3" if len(input_shape) == 3 else "none"
    if arch == "cnn3" and len(input_shape) != 3:
        raise ValueError("cnn3 needs (C, H, W) image input")
    if arch == "none" and len(input_shape) != 1:
        raise ValueError("image input needs the cnn3 trunk")
    if arch not in ("cnn3", "none"):
        raise ValueError(f"unknown encoder arch {arch!r}")
    layers = cnn3_layers(input_shape, use_layer_norm) if arch == "cnn3" else []
    feat = input_shape[0]
    if layers:
        shape = input_shape
        for l in layers:
            shape = l.out_shape(shape)
        feat = shape[0]
    if extra_dim:
        layers.append(ConcatExtra(extra_dim))
        feat += extra_dim
    layers += mlp_layers(feat, width, depth, repr_dim, use_layer_norm)
    net = Network(layers, input_shape, dtype)
    net.initialize(np.random.default_rng(rng), init_range)
    return net


def cold_init(network: Network, init_range: float, rng=None):
    """Final dense weights ~ Unif[-r, r], final bias 0."""
    dense = network.dense_layers()
    if not dense:
        raise ValueError("network has no dense layer")
    rng = np.random.default_rng(rng)
    last = dense[-1]
    last.W[...] = rng.uniform(-init_range, init_range, last.W.shape)
    last.b[...] = 0.0


def layer_norm_forward(x, gain=1.0, bias=0.0, eps=LN_EPS):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean()
    return gain * (x - mu) / np.sqrt(((x - mu) ** 2).mean() + eps) + bias


def cosine_similarity(a, b) -> np.ndarray:
    """Row-wise cosine; two exact zero vectors count as perfectly aligned."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dot = np.sum(a * b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = dot / (na * nb)
    out[(na == 0) & (nb == 0)] = 1.0
    out[(na == 0) ^ (nb == 0)] = 0.0
    return out


# ---------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, n_params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.t = 0

    def step(self, params, grads):
        if not np.all(np.isfinite(grads)):
            raise TrainingDivergence("non-finite gradient")
        if self.m.shape != params.shape:
            raise ValueError("optimizer state does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grads
        self.v *= b2
        self.v += (1 - b2) * grads * grads
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        params -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params.dtype)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params, grads, state: Adam, lr=None):
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


# ---------------------------------------------------------------- gradient checking

def relative_error(a, b) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f, x: np.ndarray, h=1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. x, perturbing x in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_network(net: Network, x, extra=None, h=1e-3, seed=0, max_params=None) -> dict:
    """Compare backward() with central differences for sum(out * r).

    ``max_params`` checks a random subset of parameters (for large nets).
    """
    rng = np.random.default_rng(seed)
    out, tape = net.forward(x, extra)
    r = rng.normal(size=out.shape)
    net.zero_grad()
    dx, dextra = net.backward(tape, r)
    analytic = net.grads.copy()

    def loss():
        return float(np.sum(net(x, extra) * r))

    idx = None
    if max_params is not None and net.n_params > max_params:
        idx = np.sort(rng.choice(net.n_params, max_params, replace=False))
    numeric = numeric_gradient(loss, net.params, h, idx)
    if idx is not None:
        analytic, numeric = analytic[idx], numeric[idx]
    errors = {"params": relative_error(analytic, numeric)}
    xx = np.array(x, dtype=net.dtype)

    def loss_x():
        return float(np.sum(net(xx, extra) * r))

    errors["input"] = relative_error(dx, numeric_gradient(loss_x, xx, h))
    if extra is not None:
        ee = np.array(extra, dtype=net.dtype)

        def loss_e():
            return float(np.sum(net(x, ee) * r))

        errors["extra"] = relative_error(dextra, numeric_gradient(loss_e, ee, h))
    return errors


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SCRLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, nets: dict, optims: dict | None = None, state: dict | None = None) -> None:
    optims = optims or {}
    header = {
        "nets": {k: nets[k].descriptor() for k in sorted(nets)},
        "optims": {k: optims[k].hyper() for k in sorted(optims)},
        "state": state or {},
    }
    blobs = [nets[k].params.astype("<f4").tobytes() for k in sorted(nets)]
    for k in sorted(optims):
        blobs += [optims[k].m.astype("<f4").tobytes(), optims[k].v.astype("<f4").tobytes()]
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(blobs)
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + struct.pack("<Q", len(blob)) + blob
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expected: dict | None = None):
    """Returns (nets, optims, state). ``expected`` maps net names to
    descriptors that must match exactly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CKPT_MAGIC) + 20 or data[:8] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    header = json.loads(body[16:16 + hlen].decode())
    (blen,) = struct.unpack("<Q", body[16 + hlen:24 + hlen])
    blob = np.frombuffer(body[24 + hlen:], dtype="<f4")
    if blob.size * 4 != blen:
        raise CorruptCheckpoint(f"{path}: truncated parameter blob")
    if expected is not None:
        for name, desc in expected.items():
            if header["nets"].get(name) != desc:
                raise IncompatibleCheckpoint(f"{path}: architecture of {name!r} does not match the config")
    off = 0
    nets = {}
    for k in sorted(header["nets"]):
        net = Network.from_descriptor(header["nets"][k])
        net.params[...] = blob[off:off + net.n_params]
        off += net.n_params
        nets[k] = net
    optims = {}
    for k in sorted(header["optims"]):
        hp = header["optims"][k]
        n = nets[k].n_params if k in nets else None
        opt = Adam(n, hp["lr"], hp["beta1"], hp["beta2"], hp["eps"])
        opt.m[...] = blob[off:off + n]
        opt.v[...] = blob[off + n:off + 2 * n]
        opt.t = hp["t"]
        off += 2 * n
        optims[k] = opt
    if off != blob.size:
        raise CorruptCheckpoint(f"{path}: parameter blob size mismatch")
    return nets, optims, header["state"]
