"""Minimal layer engine: dense/conv/pool layers with exact analytic backward
passes, classification losses, and an Adam optimizer.

All activations and parameters are float32 numpy arrays; loss accumulation
happens in float64. Every layer caches its forward inputs so that backward()
can be called immediately afterwards; calling backward without a prior
forward is an error.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

F32 = np.float32


class ShapeError(ValueError):
    pass


class Param:
    """A trainable (or frozen) array with an accumulated gradient."""

    def __init__(self, value: np.ndarray, name: str = "", trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=F32)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Fan-in-scaled uniform init, range +-sqrt(6/fan_in)."""
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(F32)


class Layer:
    """Base class; subclasses implement forward/backward with input caching."""

    name = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise RuntimeError(f"{self.name}: backward called without a prior forward")


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, name: str = "dense"):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.w = Param(init_uniform((n_in, n_out), n_in, rng), name=f"{name}/w")
        self.b = Param(np.zeros(n_out, dtype=F32), name=f"{name}/b") if bias else None
        self._cache = None

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x):
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected input dim {self.n_in}, got {x.shape}")
        self._cache = x
        out = x @ self.w.value
        if self.b is not None:
            out = out + self.b.value
        return out.astype(x.dtype)

    def backward(self, grad):
        self._require_cache()
        x = self._cache
        if grad.ndim == 1:
            grad = grad[None, :]
        self.w.grad += x.T @ grad
        if self.b is not None:
            self.b.grad += grad.sum(axis=0)
        return (grad @ self.w.value.T).astype(grad.dtype)


class ReLU(Layer):
    """Rectifier; subgradient at 0 is 0."""

    def __init__(self, name: str = "relu"):
        self.name = name
        self._cache = None

    def forward(self, x):
        self._cache = x
        return np.maximum(x, 0.0).astype(x.dtype)

    def backward(self, grad):
        self._require_cache()
        return (grad * (self._cache > 0)).astype(grad.dtype)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int):
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


class Conv2d(Layer):
    """2D convolution, zero padding, integer stride, no dilation."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True, name: str = "conv"):
        self.name = name
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        fan_in = c_in * k * k
        self.w = Param(init_uniform((c_out, c_in, k, k), fan_in, rng), name=f"{name}/w")
        self.b = Param(np.zeros(c_out, dtype=F32), name=f"{name}/b") if bias else None
        self._cache = None

    def params(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (N,{self.c_in},H,W), got {x.shape}")
        cols, ho, wo = _im2col(x, self.k, self.stride, self.pad)
        self._cache = (x.shape, cols)
        wmat = self.w.value.reshape(self.c_out, -1)
        out = np.einsum("oc,ncl->nol", wmat, cols)
        if self.b is not None:
            out = out + self.b.value[None, :, None]
        return out.reshape(x.shape[0], self.c_out, ho, wo).astype(x.dtype)

    def backward(self, grad):
        self._require_cache()
        x_shape, cols = self._cache
        n = x_shape[0]
        g = grad.reshape(n, self.c_out, -1)
        wmat = self.w.value.reshape(self.c_out, -1)
        self.w.grad += np.einsum("nol,ncl->oc", g, cols).reshape(self.w.shape)
        if self.b is not None:
            self.b.grad += g.sum(axis=(0, 2))
        dcols = np.einsum("oc,nol->ncl", wmat, g)
        return _col2im(dcols, x_shape, self.k, self.stride, self.pad).astype(grad.dtype)


class MaxPool2d(Layer):
    """Non-overlapping max pooling (kernel == stride)."""

    def __init__(self, k: int, name: str = "maxpool"):
        self.name = name
        self.k = k
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} not divisible by {k}")
        xr = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
        xr = xr.reshape(n, c, h // k, w // k, k * k)
        idx = xr.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0].astype(x.dtype)

    def backward(self, grad):
        self._require_cache()
        (n, c, h, w), idx = self._cache
        k = self.k
        dxr = np.zeros((n, c, h // k, w // k, k * k), dtype=grad.dtype)
        np.put_along_axis(dxr, idx[..., None], grad[..., None], axis=-1)
        dxr = dxr.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dxr.reshape(n, c, h, w)


class AvgPool2d(Layer):
    def __init__(self, k: int, name: str = "avgpool"):
        self.name = name
        self.k = k
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} not divisible by {k}")
        self._cache = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)).astype(x.dtype)

    def backward(self, grad):
        self._require_cache()
        n, c, h, w = self._cache
        k = self.k
        g = np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)
        return g.astype(grad.dtype)


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        self.name = name
        self._cache = None

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        self._require_cache()
        return grad.reshape(self._cache).astype(grad.dtype)


class Adam:
    """Adam with bias correction. Frozen params are left bit-identical."""

    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self):
        for p in self.params:
            if p.trainable and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name}; step rejected")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(F32)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z.astype(np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def loss_softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Cross-entropy over softmax; returns (mean loss, d loss / d logits).

    Accepts a single logit vector with an int label or a (N,K) batch with a
    length-N label array.
    """
    single = logits.ndim == 1
    lg = logits[None, :] if single else logits
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = lg.shape
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label out of range for {k} classes: {lab}")
    p = softmax(lg)
    loss = float(-np.log(np.maximum(p[np.arange(n), lab], 1e-300)).mean())
    grad = p.copy()
    grad[np.arange(n), lab] -= 1.0
    grad /= n
    grad = grad.astype(F32)
    return loss, (grad[0] if single else grad)


def loss_multi_attribute_bce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean sigmoid BCE over attributes (and over the batch when 2-D)."""
    single = logits.ndim == 1
    lg = (logits[None, :] if single else logits).astype(np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    lab = lab[None, :] if lab.ndim == 1 else lab
    if lg.shape != lab.shape:
        raise ShapeError(f"logits {lg.shape} vs labels {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("labels must be in {0,1}")
    # stable: softplus(z) - z*y = max(z,0) - z*y + log1p(exp(-|z|))
    loss = float((np.maximum(lg, 0) - lg * lab + np.log1p(np.exp(-np.abs(lg)))).mean())
    sig = 1.0 / (1.0 + np.exp(-lg))
    grad = ((sig - lab) / lg.size).astype(F32)
    return loss, (grad[0] if single else grad)


def params_hash(params: list[Param]) -> str:
    """SHA-256 over the raw bytes of the given parameters, order-sensitive."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()
