"""Layers with explicit forward/backward passes.

All activations use the NHWC layout. Each layer caches what its backward
pass needs during ``forward`` and accumulates parameter gradients into
``self.grads`` during ``backward``.
"""
from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not have a shape a layer can consume."""


class UninitializedStatisticsError(RuntimeError):
    """Raised when batch normalization is run in inference mode before any
    moving statistics have been computed or loaded."""


def conv_output_size(size: int, kernel: int, stride: int = 1) -> int:
    return (size - kernel) // stride + 1


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def output_shape(self, shape):
        return shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    """Bias-free 2-D convolution (cross-correlation).

    ``padding`` is ``"valid"`` or ``"same"`` (TensorFlow semantics, extra
    row/column of padding goes to the bottom/right).
    """

    kind = "conv"

    def __init__(self, name, kernel, in_channels, filters, stride=1, padding="valid"):
        super().__init__(name)
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        if isinstance(stride, int):
            stride = (stride, stride)
        if min(stride) < 1:
            raise ValueError("stride must be >= 1")
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.padding = padding
        self.in_channels = in_channels
        self.filters = filters
        kh, kw = self.kernel
        self.params["kernel"] = np.zeros((kh, kw, in_channels, filters), np.float32)

    def init_weights(self, rng):
        kh, kw, c, f = self.params["kernel"].shape
        std = math.sqrt(2.0 / (kh * kw * c))
        self.params["kernel"] = (rng.standard_normal((kh, kw, c, f)) * std).astype(np.float32)

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return (_same_padding(h, self.kernel[0], self.stride[0]),
                _same_padding(w, self.kernel[1], self.stride[1]))

    def output_shape(self, shape):
        n, h, w, _ = shape
        (pt, pb), (pl, pr) = self._pads(h, w)
        return (n,
                conv_output_size(h + pt + pb, self.kernel[0], self.stride[0]),
                conv_output_size(w + pl + pr, self.kernel[1], self.stride[1]),
                self.filters)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"{self.name}: expected NHWC input with {self.in_channels} "
                             f"channels, got {x.shape}")
        kh, kw = self.kernel
        sy, sx = self.stride
        n, h, w, c = x.shape
        (pt, pb), (pl, pr) = self._pads(h, w)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        hp, wp = x.shape[1:3]
        if hp < kh or wp < kw:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than kernel {kh}x{kw}")
        ho = conv_output_size(hp, kh, sy)
        wo = conv_output_size(wp, kw, sx)
        cols = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i * kw + j, :] = x[:, i:i + sy * (ho - 1) + 1:sy,
                                                  j:j + sx * (wo - 1) + 1:sx, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        wmat = self.params["kernel"].reshape(kh * kw * c, self.filters).astype(x.dtype, copy=False)
        y = cols @ wmat
        self._cache = (cols, x.shape, (pt, pb, pl, pr), (ho, wo))
        return y.reshape(n, ho, wo, self.filters)

    def backward(self, dy):
        cols, xshape, (pt, pb, pl, pr), (ho, wo) = self._cache
        kh, kw = self.kernel
        sy, sx = self.stride
        n, hp, wp, c = xshape
        dy2 = dy.reshape(-1, self.filters)
        kernel = self.params["kernel"]
        self.grads["kernel"] = (cols.T @ dy2).reshape(kernel.shape).astype(kernel.dtype, copy=False)
        wmat = kernel.reshape(kh * kw * c, self.filters).astype(dy.dtype, copy=False)
        dcols = (dy2 @ wmat.T).reshape(n, ho, wo, kh * kw, c)
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + sy * (ho - 1) + 1:sy, j:j + sx * (wo - 1) + 1:sx, :] += \
                    dcols[:, :, :, i * kw + j, :]
        return dx[:, pt:hp - pb, pl:wp - pr, :]


class MaxPool2D(Layer):
    """Max pooling with valid padding. Gradient goes to the first argmax of
    each window."""

    kind = "maxpool"

    def __init__(self, name, window=3, stride=1):
        super().__init__(name)
        self.window = (window, window) if isinstance(window, int) else tuple(window)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)

    def output_shape(self, shape):
        n, h, w, c = shape
        return (n, conv_output_size(h, self.window[0], self.stride[0]),
                conv_output_size(w, self.window[1], self.stride[1]), c)

    def forward(self, x, train=False, rng=None):
        kh, kw = self.window
        sy, sx = self.stride
        n, h, w, c = x.shape
        if h < kh or w < kw:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than window {kh}x{kw}")
        ho = conv_output_size(h, kh, sy)
        wo = conv_output_size(w, kw, sx)
        out = None
        arg = np.zeros((n, ho, wo, c), dtype=np.int8)
        for i in range(kh):
            for j in range(kw):
                v = x[:, i:i + sy * (ho - 1) + 1:sy, j:j + sx * (wo - 1) + 1:sx, :]
                if out is None:
                    out = v.copy()
                    continue
                better = v > out
                out = np.where(better, v, out)
                arg[better] = i * kw + j
        self._cache = (arg, x.shape, (ho, wo))
        return out

    def backward(self, dy):
        arg, xshape, (ho, wo) = self._cache
        kh, kw = self.window
        sy, sx = self.stride
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                mask = arg == i * kw + j
                dx[:, i:i + sy * (ho - 1) + 1:sy, j:j + sx * (wo - 1) + 1:sx, :] += dy * mask
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over the batch and spatial axes.

    Trainable parameters are ``gamma`` and ``beta``; ``moving_mean`` and
    ``moving_var`` are buffers updated as
    ``moving = momentum * moving + (1 - momentum) * batch``.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.9, eps=1e-3):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.buffers["moving_mean"] = np.zeros(channels, np.float32)
        self.buffers["moving_var"] = np.ones(channels, np.float32)
        self.stats_ready = False
        self.update_stats = True

    def set_moving_stats(self, mean, var):
        var = np.asarray(var, np.float32)
        if np.any(var <= 0):
            raise ValueError("moving variance must be strictly positive")
        self.buffers["moving_mean"] = np.asarray(mean, np.float32).copy()
        self.buffers["moving_var"] = var.copy()
        self.stats_ready = True

    def forward(self, x, train=False, rng=None):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        gamma = self.params["gamma"].astype(x.dtype, copy=False)
        beta = self.params["beta"].astype(x.dtype, copy=False)
        if not train:
            if not self.stats_ready:
                raise UninitializedStatisticsError(
                    f"{self.name}: inference requested before moving statistics exist")
            mean = self.buffers["moving_mean"].astype(x.dtype)
            var = self.buffers["moving_var"].astype(x.dtype)
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        count = x.size // self.channels
        if x.shape[0] < 2:
            raise ShapeError(f"{self.name}: training mode needs batch size >= 2")
        # reductions as matrix-vector products over a (count, C) view
        x2 = x.reshape(count, self.channels)
        ones = np.ones(count, x.dtype)
        mean = (ones @ x2) / count
        xhat = x2 - mean
        var = (ones @ (xhat * xhat)) / count
        inv_std = (1.0 / np.sqrt(var.astype(np.float64) + self.eps)).astype(x.dtype)
        xhat *= inv_std
        if self.update_stats:
            m = self.momentum
            self.buffers["moving_mean"] = (m * self.buffers["moving_mean"]
                                           + (1 - m) * mean).astype(np.float32)
            self.buffers["moving_var"] = (m * self.buffers["moving_var"]
                                          + (1 - m) * var).astype(np.float32)
            self.stats_ready = True
        self._cache = (xhat, inv_std, count, x.shape)
        return (xhat * gamma + beta).reshape(x.shape)

    def backward(self, dy):
        xhat, inv_std, count, shape = self._cache
        gamma = self.params["gamma"]
        dy2 = dy.reshape(count, self.channels)
        ones = np.ones(count, dy.dtype)
        dgamma = ones @ (dy2 * xhat)
        dbeta = ones @ dy2
        self.grads["gamma"] = dgamma.astype(gamma.dtype)
        self.grads["beta"] = dbeta.astype(gamma.dtype)
        g = gamma.astype(dy.dtype) * inv_std
        dx = g * (dy2 - dbeta / count - xhat * (dgamma / count))
        return dx.reshape(shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        y = sigmoid(x)
        self._y = y
        return y

    def backward(self, dy):
        y = self._y
        return dy * y * (1 - y)


def sigmoid(x):
    # numerically stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep strictly inside (0, 1) where the float type saturates
    tiny = np.finfo(out.dtype).tiny if out.dtype.kind == "f" else 0
    return np.clip(out, tiny, np.nextafter(out.dtype.type(1), out.dtype.type(0)), out=out)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train
    time, inference is the identity."""

    kind = "dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1 - self.rate)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class L2Normalize(Layer):
    """Flattens each sample and scales it to unit euclidean norm."""

    kind = "l2norm"

    def __init__(self, name, eps=1e-10):
        super().__init__(name)
        self.eps = eps

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        norm = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1, keepdims=True) + self.eps)
        y = (flat / norm).astype(x.dtype)
        self._cache = (y, norm.astype(x.dtype))
        return y

    def backward(self, dy):
        y, norm = self._cache
        dx = (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm
        return dx.reshape(self._shape)
