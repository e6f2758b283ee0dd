"""Minimal deterministic neural-network kernel.

Dense/conv/pool/dropout layers over numpy arrays with reverse-mode
gradients, cross-entropy losses, and an Adam optimizer.  Sequence tensors
are channels-first: (batch, channels, time).  Everything is deterministic
given the seed; precision is float32 by default and can be switched to
float64 with the GENSHIELD_PRECISION environment variable (f32/f64) or a
dtype argument.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ShapeError, StateError, TrainingError

LOG_EPS = 1e-7


def default_dtype():
    name = os.environ.get("GENSHIELD_PRECISION", "f32")
    if name == "f32":
        return np.float32
    if name == "f64":
        return np.float64
    raise ArgumentError(f"GENSHIELD_PRECISION must be 'f32' or 'f64', got {name!r}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: forward caches what backward needs, params live on the layer."""

    trainable = True

    def params(self):
        """List of (name, array) parameter pairs; empty for stateless layers."""
        return []

    def grads(self):
        return {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError

    def spec(self):
        """Serializable description: kind + hyperparameters."""
        raise NotImplementedError

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise StateError(f"{type(self).__name__}: backward called before forward")


class Dense(Layer):
    def __init__(self, in_dim, out_dim, dtype=None, rng=None):
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / in_dim)
        self.w = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"Dense: expected input (n, {self.w.shape[1]}), got {x.shape}"
            )
        self._cache = x
        return x @ self.w.T + self.b

    def backward(self, gout):
        self._require_cache()
        x = self._cache
        if self.trainable:
            self.gw[...] = gout.T @ x
            self.gb[...] = gout.sum(axis=0)
        return gout @ self.w

    def spec(self):
        return {"kind": "Dense", "in_dim": self.w.shape[1], "out_dim": self.w.shape[0]}


class PositionwiseDense(Layer):
    """Shared linear map over the channel axis, applied at every time step."""

    def __init__(self, in_ch, out_ch, dtype=None, rng=None):
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / in_ch)
        self.w = rng.uniform(-limit, limit, size=(out_ch, in_ch)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"PositionwiseDense: expected (n, {self.w.shape[1]}, t), got {x.shape}"
            )
        n, c, t = x.shape
        flat = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(n * t, c)
        self._cache = (flat, x.shape)
        y = flat @ self.w.T + self.b
        return np.ascontiguousarray(y.reshape(n, t, -1).transpose(0, 2, 1))

    def backward(self, gout):
        self._require_cache()
        flat, (n, c, t) = self._cache
        g2 = np.ascontiguousarray(gout.transpose(0, 2, 1)).reshape(n * t, -1)
        if self.trainable:
            self.gw[...] = g2.T @ flat
            self.gb[...] = g2.sum(axis=0)
        gx = g2 @ self.w
        return np.ascontiguousarray(gx.reshape(n, t, c).transpose(0, 2, 1))

    def spec(self):
        return {
            "kind": "PositionwiseDense",
            "in_ch": self.w.shape[1],
            "out_ch": self.w.shape[0],
        }


class Conv1D(Layer):
    """Valid cross-correlation along time, stride 1."""

    def __init__(self, in_ch, out_ch, kernel, dtype=None, rng=None):
        if kernel < 1:
            raise ArgumentError("Conv1D: kernel length must be >= 1")
        dtype = dtype or default_dtype()
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    @property
    def kernel(self):
        return self.w.shape[2]

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def grads(self):
        return {"w": self.gw, "b": self.gb}

    def forward(self, x, train=False, rng=None):
        k = self.kernel
        if x.ndim != 3 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(
                f"Conv1D: expected (n, {self.w.shape[1]}, t), got {x.shape}"
            )
        if x.shape[2] < k:
            raise ShapeError(
                f"Conv1D: time length {x.shape[2]} shorter than kernel {k}"
            )
        n, c, t = x.shape
        length = t - k + 1
        windows = sliding_window_view(x, k, axis=2)  # (n, c, L, k)
        flat = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
            n * length, c * k
        )
        self._cache = (flat, x.shape)
        wf = self.w.reshape(self.w.shape[0], c * k)
        y = flat @ wf.T + self.b
        return np.ascontiguousarray(
            y.reshape(n, length, -1).transpose(0, 2, 1)
        )

    def backward(self, gout):
        self._require_cache()
        flat, (n, c, t) = self._cache
        k = self.kernel
        o = self.w.shape[0]
        length = t - k + 1
        g2 = np.ascontiguousarray(gout.transpose(0, 2, 1)).reshape(n * length, o)
        if self.trainable:
            self.gw[...] = (g2.T @ flat).reshape(o, c, k)
            self.gb[...] = g2.sum(axis=0)
        gwin = (g2 @ self.w.reshape(o, c * k)).reshape(n, length, c, k)
        gwin = gwin.transpose(0, 2, 1, 3)  # (n, c, L, k)
        gx = np.zeros((n, c, t), dtype=gout.dtype)
        for kk in range(k):  # k is tiny (3 or 5)
            gx[:, :, kk : kk + length] += gwin[:, :, :, kk]
        return gx

    def spec(self):
        return {
            "kind": "Conv1D",
            "in_ch": self.w.shape[1],
            "out_ch": self.w.shape[0],
            "kernel": self.kernel,
        }


class MaxPool1D(Layer):
    """Non-overlapping max pooling over time; trailing remainder is dropped."""

    def __init__(self, pool):
        if pool < 1:
            raise ArgumentError("MaxPool1D: pool length must be >= 1")
        self.pool = pool
        self._cache = None

    def forward(self, x, train=False, rng=None):
        p = self.pool
        if x.ndim != 3:
            raise ShapeError(f"MaxPool1D: expected (n, c, t), got {x.shape}")
        if x.shape[2] < p:
            raise ShapeError(
                f"MaxPool1D: time length {x.shape[2]} shorter than pool {p}"
            )
        n, c, t = x.shape
        out_t = t // p
        blocks = x[:, :, : out_t * p].reshape(n, c, out_t, p)
        argmax = blocks.argmax(axis=3)
        self._cache = (x.shape, argmax)
        return np.take_along_axis(blocks, argmax[..., None], axis=3)[..., 0]

    def backward(self, gout):
        self._require_cache()
        shape, argmax = self._cache
        n, c, t = shape
        p = self.pool
        out_t = t // p
        gx = np.zeros(shape, dtype=gout.dtype)
        gblocks = gx[:, :, : out_t * p].reshape(n, c, out_t, p)
        np.put_along_axis(gblocks, argmax[..., None], gout[..., None], axis=3)
        return gx

    def spec(self):
        return {"kind": "MaxPool1D", "pool": self.pool}


class Dropout(Layer):
    """Inverted dropout: active only in Train mode, identity in Eval mode."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ArgumentError("Dropout: rate must be in [0, 1)")
        self.rate = rate
        self._cache = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise StateError("Dropout: Train-mode forward requires an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._cache = mask
        return x * mask

    def backward(self, gout):
        if self._cache is None:
            return gout
        return gout * self._cache

    def spec(self):
        return {"kind": "Dropout", "rate": self.rate}


class Flatten(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        self._require_cache()
        return gout.reshape(self._cache)

    def spec(self):
        return {"kind": "Flatten"}


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, gout):
        self._require_cache()
        return gout * self._cache

    def spec(self):
        return {"kind": "ReLU"}


class Softmax(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        self._cache = p
        return p

    def backward(self, gout):
        self._require_cache()
        p = self._cache
        return p * (gout - (gout * p).sum(axis=-1, keepdims=True))

    def spec(self):
        return {"kind": "Softmax"}


class Sigmoid(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, rng=None):
        p = 1.0 / (1.0 + np.exp(-x))
        self._cache = p
        return p

    def backward(self, gout):
        self._require_cache()
        p = self._cache
        return gout * p * (1.0 - p)

    def spec(self):
        return {"kind": "Sigmoid"}


_LAYER_KINDS = {
    "Dense": lambda s, dtype: Dense(s["in_dim"], s["out_dim"], dtype=dtype),
    "PositionwiseDense": lambda s, dtype: PositionwiseDense(
        s["in_ch"], s["out_ch"], dtype=dtype
    ),
    "Conv1D": lambda s, dtype: Conv1D(s["in_ch"], s["out_ch"], s["kernel"], dtype=dtype),
    "MaxPool1D": lambda s, dtype: MaxPool1D(s["pool"]),
    "Dropout": lambda s, dtype: Dropout(s["rate"]),
    "Flatten": lambda s, dtype: Flatten(),
    "ReLU": lambda s, dtype: ReLU(),
    "Softmax": lambda s, dtype: Softmax(),
    "Sigmoid": lambda s, dtype: Sigmoid(),
}


def layer_from_spec(spec, dtype=None):
    kind = spec.get("kind")
    if kind not in _LAYER_KINDS:
        raise ArgumentError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](spec, dtype or default_dtype())


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class NeuralNet:
    """Ordered layer stack with a private rng for dropout masks."""

    def __init__(self, layers, seed=0):
        self.layers = list(layers)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=self.rng)
        return x

    def backward(self, gout):
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout

    def parameters(self):
        """Flat (layer_index, name, array) view over all parameters."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params():
                out.append((i, name, arr))
        return out

    def param_count(self):
        return sum(arr.size for _, _, arr in self.parameters())

    def set_trainable(self, flag):
        for layer in self.layers:
            layer.trainable = flag

    @property
    def frozen(self):
        return all(not layer.trainable for layer in self.layers if layer.params())

    def specs(self):
        return [layer.spec() for layer in self.layers]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_one_hot(true):
    ok = np.all(np.isin(true, (0, 1))) and np.all(np.asarray(true).sum(axis=-1) == 1)
    if not ok:
        raise ArgumentError("true labels must be one-hot vectors")


def categorical_cross_entropy(pred, true):
    """Mean CCE over the batch and its gradient w.r.t. pred.

    pred: (n, c) rows on the simplex (clamped to [eps, 1-eps] inside);
    true: (n, c) one-hot rows.  1-D inputs are treated as a batch of one.
    """
    pred = np.atleast_2d(np.asarray(pred))
    true = np.atleast_2d(np.asarray(true))
    if pred.shape != true.shape:
        raise ArgumentError(f"pred {pred.shape} and true {true.shape} differ")
    _check_one_hot(true)
    n = pred.shape[0]
    p = np.clip(pred, LOG_EPS, 1.0 - LOG_EPS)
    loss = -(true * np.log(p)).sum() / n
    grad = np.where(true > 0, -true / p, 0.0) / n
    return loss, grad.reshape(pred.shape)


def binary_cross_entropy(pred, true):
    """Mean BCE over the batch and its gradient w.r.t. pred."""
    pred = np.atleast_1d(np.asarray(pred, dtype=float))
    true = np.atleast_1d(np.asarray(true, dtype=float))
    if pred.shape != true.shape:
        raise ArgumentError(f"pred {pred.shape} and true {true.shape} differ")
    if not np.all(np.isin(true, (0.0, 1.0))):
        raise ArgumentError("binary labels must be 0 or 1")
    n = pred.shape[0]
    p = np.clip(pred, LOG_EPS, 1.0 - LOG_EPS)
    loss = -(true * np.log(p) + (1.0 - true) * np.log(1.0 - p)).sum() / n
    grad = (-(true / p) + (1.0 - true) / (1.0 - p)) / n
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; skips parameters on frozen layers."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, nets, batch_id=None):
        """Apply one update to every trainable parameter of the given nets."""
        if isinstance(nets, NeuralNet):
            nets = [nets]
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for ni, net in enumerate(nets):
            for li, layer in enumerate(net.layers):
                if not layer.trainable:
                    continue
                grads = layer.grads()
                for name, arr in layer.params():
                    g = grads[name]
                    if not np.all(np.isfinite(g)):
                        raise TrainingError(
                            f"non-finite gradient in layer {li} ({name})"
                            + (f", batch {batch_id}" if batch_id is not None else "")
                        )
                    key = (ni, li, name)
                    if key not in self._m:
                        self._m[key] = np.zeros_like(arr)
                        self._v[key] = np.zeros_like(arr)
                    m, v = self._m[key], self._v[key]
                    m *= self.beta1
                    m += (1.0 - self.beta1) * g
                    v *= self.beta2
                    v += (1.0 - self.beta2) * g * g
                    arr -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(
                        arr.dtype
                    )


def sgd_step(nets, optimizer, batch_id=None):
    """One optimizer update; kept as a function for symmetry with the losses."""
    optimizer.step(nets, batch_id=batch_id)
