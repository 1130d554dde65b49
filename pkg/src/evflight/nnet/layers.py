"""Dense NHWC layers with hand-written backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates nothing: ``backward`` returns the input gradient and stores
parameter gradients in ``self.grads`` (same order as ``self.params``).
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Layer:
    params: list[np.ndarray] = []
    grads: list[np.ndarray] = []
    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """2-D cross-correlation on NHWC tensors; weight layout ``(c_out, c_in, k, k)``."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float64, name: str = "conv"):
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, kernel, stride, padding
        self.name = name
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.w = rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)).astype(dtype)
        self.b = np.zeros(c_out, dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]
        self.input_grad = True  # the first layer of a network can skip it

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    @staticmethod
    def _im2col(x, k, pad, stride):
        """Rows are output pixels; columns ordered (ki, kj, channel)."""
        n, h, w, c = x.shape
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = np.empty((n, ho, wo, k, k, c), x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride,
                                            j:j + stride * (wo - 1) + 1:stride, :]
        return cols.reshape(n * ho * wo, k * k * c), (n, ho, wo)

    def _wmat(self):
        return self.w.transpose(0, 2, 3, 1).reshape(self.c_out, -1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"{self.name}: input {x.shape} incompatible with weight {self.w.shape}")
        self._in_shape = x.shape
        cols, (n, ho, wo) = self._im2col(x, self.k, self.pad, self.stride)
        self._cols = cols
        out = cols @ self._wmat().T
        out += self.b
        return out.reshape(n, ho, wo, self.c_out)

    def backward(self, g):
        k, p, s = self.k, self.pad, self.stride
        g2 = g.reshape(-1, self.c_out)
        self.grads[0][...] = (g2.T @ self._cols).reshape(self.c_out, k, k, self.c_in).transpose(0, 3, 1, 2)
        self.grads[1][...] = g2.sum(axis=0)
        self._cols = None
        if not self.input_grad:
            return None
        if s == 1 and p <= k - 1:
            # input gradient = correlation of the padded output gradient with the flipped kernel
            cols, _ = self._im2col(g, k, k - 1 - p, 1)
            wf = self.w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, self.c_in)
            n, h, w, _ = self._in_shape
            return (cols @ wf).reshape(n, h, w, self.c_in)
        return self._backward_strided(g)

    def _backward_strided(self, g):
        n, h, w, _ = self._in_shape
        k, p, s = self.k, self.pad, self.stride
        ho, wo = g.shape[1:3]
        dcols = (g.reshape(-1, self.c_out) @ self._wmat()).reshape(n, ho, wo, k, k, self.c_in)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, self.c_in), g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :]


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2, NHWC; odd trailing rows/columns are dropped."""

    name = "maxpool"

    def forward(self, x):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        self._in_shape = x.shape
        blocks = x[:, :h2 * 2, :w2 * 2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, h2, w2, c, 4)
        self._arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, h, w, c = self._in_shape
        h2, w2 = g.shape[1:3]
        blocks = np.zeros((n, h2, w2, c, 4), g.dtype)
        np.put_along_axis(blocks, self._arg[..., None], g[..., None], axis=-1)
        dx = np.zeros(self._in_shape, g.dtype)
        dx[:, :h2 * 2, :w2 * 2] = (blocks.reshape(n, h2, w2, c, 2, 2)
                                   .transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c))
        return dx


class ELU(Layer):
    name = "elu"

    def forward(self, x):
        self._neg = x <= 0
        y = np.where(self._neg, np.expm1(np.minimum(x, 0)), x)
        self._y = y
        return y

    def backward(self, g):
        return np.where(self._neg, g * (self._y + 1.0), g)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0)))


class GridAvgPool(Layer):
    """Average NHWC input over a ``grid x grid`` tiling and flatten to ``(N, grid*grid*C)``."""

    name = "gridpool"

    def __init__(self, grid: int):
        self.grid = grid

    def forward(self, x):
        n, h, w, c = x.shape
        g = self.grid
        if h % g or w % g:
            raise ShapeError(f"{self.name}: {h}x{w} not divisible into a {g}x{g} grid")
        self._shape = x.shape
        return x.reshape(n, g, h // g, g, w // g, c).mean(axis=(2, 4)).reshape(n, -1)

    def backward(self, g):
        n, h, w, c = self._shape
        k = self.grid
        gg = g.reshape(n, k, 1, k, 1, c) / ((h // k) * (w // k))
        return np.broadcast_to(gg, (n, k, h // k, k, w // k, c)).reshape(n, h, w, c).copy()


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 dtype=np.float64, zero: bool = False, name: str = "linear"):
        rng = rng or np.random.default_rng(0)
        self.name = name
        bound = 1.0 / np.sqrt(n_in)
        self.w = (np.zeros((n_out, n_in)) if zero else rng.uniform(-bound, bound, (n_out, n_in))).astype(dtype)
        self.b = np.zeros(n_out, dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"{self.name}: input {x.shape} incompatible with weight {self.w.shape}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, g):
        self.grads[0][...] = g.T @ self._x
        self.grads[1][...] = g.sum(axis=0)
        return g @ self.w


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
