"""Volumetric layers with forward and backward rules.

Tensors are laid out ``[n, channels, d, h, w]``. Convolutions use "same" zero
padding and stride 1; they are computed as an im2col matrix product whose
column matrix is kept for the weight gradient.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, concat, get_default_dtype, make_op

ELU_ALPHA = 1.0


# -- functional ------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, d, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 4, 1).reshape(n * d * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))  # n c d h w k k k
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * d * h * w, c * k ** 3)


def _correlate(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    n, _, d, h, w = x.shape
    o, k = weight.shape[0], weight.shape[2]
    out = _im2col(x, k) @ weight.reshape(o, -1).T
    return out.reshape(n, d, h, w, o).transpose(0, 4, 1, 2, 3)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: shapes {x.shape} vs {weight.shape}")
    o, c, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c:
        raise ShapeError(f"conv3d: in_ch mismatch, input {x.shape} vs kernel {weight.shape}")
    if k % 2 == 0 or weight.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic with odd size, got {weight.shape}")
    n, _, d, h, w = x.shape
    cols = _im2col(x.data, k)
    out = (cols @ weight.data.reshape(o, -1).T).reshape(n, d, h, w, o).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            flipped = weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            gx = _correlate(g, np.ascontiguousarray(flipped))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))
    return make_op("conv3d", inputs, np.ascontiguousarray(out), bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased
    variance for the running estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: training needs batch size >= 2, got {x.shape[0]}")
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / (m - 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb
    return make_op("batchnorm", (x, gamma, beta), out, bw)


def elu(x: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    if alpha <= 0:
        raise ValueError("elu alpha must be positive")
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0)))
    return make_op("elu", (x,), out, lambda g: (g * np.where(pos, 1, out + alpha),))


def _check_pool(op: str, x: Tensor) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected [n, c, d, h, w], got {x.shape}")


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max-pool, stride 2. Ties route the gradient to the first voxel
    of the block in (z, y, x) scan order."""
    _check_pool("maxpool3d", x)
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d: spatial dims must be even, got {x.shape}")
    blocks = (x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape))
        return (gx,)
    return make_op("maxpool3d", (x,), out, bw)


def uppool3d(x: Tensor) -> Tensor:
    """Nearest-neighbour up-pooling: each voxel becomes a 2x2x2 block."""
    _check_pool("uppool3d", x)
    n, c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                          (n, c, d, 2, h, 2, w, 2)).reshape(n, c, 2 * d, 2 * h, 2 * w)

    def bw(g):
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)
    return make_op("uppool3d", (x,), out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial axes: ``[n, c, ...] -> [n, c]``."""
    n, c = x.shape[:2]
    m = x.size // (n * c)
    out = x.data.reshape(n, c, m).mean(axis=2)
    return make_op("global_avg_pool", (x,), out,
                   lambda g: (np.broadcast_to((g / m)[:, :, None], (n, c, m)).reshape(x.shape).copy(),))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)
    return make_op("dense", inputs, out, bw)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted."""
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return make_op("softmax", (x,), out,
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return make_op("log_softmax", (x,), out,
                   lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped strictly inside (0, 1) at the active precision."""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e))
    fi = np.finfo(x.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)
    return make_op("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join along axis 1; ``a``'s channels come first."""
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


# -- parameterised layers -----------------------------------------------------------

def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv3d:
    def __init__(self, in_ch: int, out_ch: int, k: int = 3, rng: np.random.Generator | None = None,
                 name: str = "conv"):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if in_ch < 1 or out_ch < 1:
            raise ValueError("channel counts must be >= 1")
        rng = rng or np.random.default_rng(0)
        dtype = get_default_dtype()
        shape = (out_ch, in_ch, k, k, k)
        self.weight = Tensor(uniform_fan_in(rng, shape, in_ch * k ** 3), requires_grad=True,
                             name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias", dtype=dtype)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)


class BatchNorm3d:
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        dtype = get_default_dtype()
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma", dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta", dtype=dtype)
        self.running_mean = Tensor(np.zeros(channels), name=f"{name}.running_mean", dtype=dtype)
        self.running_var = Tensor(np.ones(channels), name=f"{name}.running_var", dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> list[Tensor]:
        return [self.running_mean, self.running_var]

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                         self.training, self.momentum, self.eps)


class Dense:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 name: str = "dense", zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        dtype = get_default_dtype()
        w = (np.zeros((out_features, in_features)) if zero_init
             else uniform_fan_in(rng, (out_features, in_features), in_features))
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias", dtype=dtype)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)
