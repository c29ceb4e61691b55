"""Minimal reverse-mode network primitives on numpy arrays.

Layers cache what they need during ``forward`` and consume it in
``backward``; parameter gradients are accumulated into ``Tensor.grad``.
Image batches use NHWC layout.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_CLIP = 1e-7
_IDENTITY = object()


class Tensor:
    """Parameter array with a gradient buffer of the same shape."""

    def __init__(self, values, name: str = ""):
        values = np.asarray(values)
        self.values = np.array(values, dtype=values.dtype if values.dtype.kind == "f" else np.float64)
        self.grad = np.zeros_like(self.values)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    def params(self) -> list[Tensor]:
        return []

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a matching forward pass")
        cache, self._cache = self._cache, None
        return cache

    def l2_penalty(self) -> float:
        return 0.0


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, l2: float = 0.0,
                 dtype=np.float64, name: str = "dense"):
        super().__init__()
        if l2 < 0:
            raise ValueError("L2 coefficient must be nonnegative")
        self.fan_in, self.fan_out, self.l2 = fan_in, fan_out, l2
        self.weight = Tensor(glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out), dtype), f"{name}.w")
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), f"{name}.b")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ValueError(f"dense expects (batch, {self.fan_in}), got {x.shape}")
        self._cache = x
        return x @ self.weight.values + self.bias.values

    def backward(self, upstream):
        x = self._take_cache()
        if upstream.shape != (x.shape[0], self.fan_out):
            raise ValueError(f"dense upstream grad expected {(x.shape[0], self.fan_out)}, got {upstream.shape}")
        self.weight.grad += x.T @ upstream
        if self.l2:
            self.weight.grad += 2.0 * self.l2 * self.weight.values
        self.bias.grad += upstream.sum(axis=0)
        return upstream @ self.weight.values.T

    def l2_penalty(self):
        if not self.l2:
            return 0.0
        return float(self.l2 * np.sum(self.weight.values ** 2))


class Conv2D(Layer):
    """Square-kernel convolution with zero padding, NHWC in and out."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, dtype=np.float64, name: str = "conv"):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.weight = Tensor(glorot_uniform(rng, fan_in, fan_out, (in_channels, kernel, kernel, out_channels), dtype),
                             f"{name}.w")
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), f"{name}.b")

    def params(self):
        return [self.weight, self.bias]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(f"conv2d expects (batch, H, W, {self.in_channels}), got {x.shape}")
        n, h, w, _ = x.shape
        ho, wo = self.output_hw(h, w)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d input {h}x{w} too small for kernel {self.kernel}")
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.reshape(n * ho * wo, self.in_channels * k * k)
        w2 = self.weight.values.reshape(-1, self.out_channels)
        out = cols @ w2 + self.bias.values
        self._cache = (x.shape, xp.shape, cols)
        return out.reshape(n, ho, wo, self.out_channels)

    def backward(self, upstream):
        x_shape, xp_shape, cols = self._take_cache()
        n = x_shape[0]
        ho, wo = self.output_hw(x_shape[1], x_shape[2])
        if upstream.shape != (n, ho, wo, self.out_channels):
            raise ValueError(f"conv2d upstream grad expected {(n, ho, wo, self.out_channels)}, got {upstream.shape}")
        k, s, p = self.kernel, self.stride, self.padding
        g2 = upstream.reshape(-1, self.out_channels)
        self.weight.grad += (cols.T @ g2).reshape(self.weight.shape)
        self.bias.grad += g2.sum(axis=0)
        dcols = (g2 @ self.weight.values.reshape(-1, self.out_channels).T).reshape(n, ho, wo, self.in_channels, k, k)
        dxp = np.zeros(xp_shape, dtype=upstream.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[..., i, j]
        if p:
            dxp = dxp[:, p:p + x_shape[1], p:p + x_shape[2], :]
        return dxp


class ReLU(Layer):
    kind = "activation"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, upstream):
        mask = self._take_cache()
        if upstream.shape != mask.shape:
            raise ValueError(f"relu upstream grad expected {mask.shape}, got {upstream.shape}")
        return upstream * mask


class Sigmoid(Layer):
    kind = "activation"

    def forward(self, x, training=False, rng=None):
        out = sigmoid(x)
        self._cache = out
        return out

    def backward(self, upstream):
        out = self._take_cache()
        return upstream * out * (1.0 - out)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ValueError(f"gap expects (batch, H, W, C), got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, upstream):
        n, h, w, c = self._take_cache()
        if upstream.shape != (n, c):
            raise ValueError(f"gap upstream grad expected {(n, c)}, got {upstream.shape}")
        return np.broadcast_to(upstream[:, None, None, :] / (h * w), (n, h, w, c)).copy()


class Dropout(Layer):
    """Inverted dropout; ``rate`` is the probability of zeroing a unit.

    Setting ``replay`` reuses the last drawn mask, which makes a training-mode
    pass deterministic for gradient checking.
    """

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.replay = False
        self.mask: np.ndarray | None = None

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = _IDENTITY
            return x
        if not (self.replay and self.mask is not None and self.mask.shape == x.shape):
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            keep = rng.random(x.shape) >= self.rate
            self.mask = keep.astype(x.dtype) / (1.0 - self.rate)
        self._cache = self.mask
        return x * self.mask

    def backward(self, upstream):
        mask = self._take_cache()
        if mask is _IDENTITY:
            return upstream
        return upstream * mask


class Flatten(Layer):
    kind = "activation"

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return upstream.reshape(self._take_cache())


class Sequential:
    """Layer chain with optional named taps on intermediate outputs."""

    def __init__(self, layers: Sequence[Layer], taps: dict[str, int] | None = None):
        self.layers = list(layers)
        self.taps = dict(taps or {})

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, training=False, rng=None, collect: Iterable[str] = ()):
        wanted = {self.taps[name]: name for name in collect}
        tapped = {}
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training=training, rng=rng)
            if i in wanted:
                tapped[wanted[i]] = x
        return (x, tapped) if collect else x

    def backward(self, upstream):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream

    def l2_penalty(self) -> float:
        return sum(layer.l2_penalty() for layer in self.layers)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float64) if x.dtype.kind != "f" else x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def wbce_loss(prediction, label, pos_weight: float = 1.0, neg_weight: float = 1.0):
    """Class-weighted binary cross-entropy on probabilities.

    Returns per-element ``(loss, dloss/dprediction)``. Predictions are clipped
    to ``[EPS_CLIP, 1 - EPS_CLIP]``; the gradient is zero where clipping binds.
    """
    p = np.asarray(prediction, dtype=float)
    y = np.asarray(label, dtype=float)
    pc = np.clip(p, EPS_CLIP, 1.0 - EPS_CLIP)
    w = np.where(y == 1, pos_weight, neg_weight)
    loss = -w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = -w * (y / pc - (1.0 - y) / (1.0 - pc))
    grad = np.where((p < EPS_CLIP) | (p > 1.0 - EPS_CLIP), 0.0, grad)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def mse_loss(prediction, target):
    diff = np.asarray(prediction, dtype=float) - np.asarray(target, dtype=float)
    if diff.ndim == 0:
        return float(diff ** 2), float(2.0 * diff)
    return diff ** 2, 2.0 * diff


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cce_loss(logits, class_index):
    """Softmax cross-entropy; returns per-row loss and gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    idx = np.atleast_1d(np.asarray(class_index)).astype(int)
    n_classes = z2.shape[1]
    if np.any((idx < 0) | (idx >= n_classes)):
        raise ValueError(f"class index out of range for {n_classes} logits: {idx[(idx < 0) | (idx >= n_classes)]}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = log_norm - shifted[rows, idx]
    grad = softmax(z2)
    grad[rows, idx] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


class NesterovSGD:
    """SGD with look-ahead Nesterov momentum.

    ``v <- mu*v - lr*grad(w + mu*v)``, ``w <- w + v``. Call :meth:`lookahead`
    before the forward/backward pass so gradients are taken at ``w + mu*v``,
    then :meth:`step`.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]
        self._anchor: list[np.ndarray] | None = None

    def lookahead(self) -> None:
        self._anchor = [p.values.copy() for p in self.params]
        if self.momentum:
            for p, v in zip(self.params, self.velocity):
                p.values += self.momentum * v

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'}")
        anchor = self._anchor or [p.values.copy() for p in self.params]
        for p, v, w in zip(self.params, self.velocity, anchor):
            v *= self.momentum
            v -= self.lr * p.grad
            p.values[...] = w + v
        self._anchor = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def central_difference(fn, tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensor``."""
    grad = np.zeros(tensor.values.shape, dtype=np.float64)
    flat = tensor.values.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
