"""Layer kernels: convolutions, pooling, batch norm, dropblock, dense.

Each kernel is a single tape node with a hand-written backward. Inputs are
NCHW. Dense and 1x1 convolutions go through BLAS; depthwise, pooling and
batch-norm loops live in ``_kernels``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels as K
from .tensor import ContractError, DimensionError, Tensor, as_tensor, make_op, parameter

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


# -- convolutions --------------------------------------------------------------

def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense convolution, weight shape (C_out, C_in, k, k), no bias."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    Co, Ci, k, k2 = w.shape
    if Ci != C or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if k == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w)
    Ho, Wo = out_size(H, k, stride, padding), out_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(Co, C * k * k)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wm).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j]
        return _unpad(dxp, padding), dw

    return make_op(np.ascontiguousarray(out), (x, w), back)


def _conv1x1(x: Tensor, w: Tensor) -> Tensor:
    B, C, H, W = x.shape
    Co = w.shape[0]
    wm = w.data.reshape(Co, C)
    xf = x.data.reshape(B, C, H * W)
    out = np.matmul(wm, xf).reshape(B, Co, H, W)

    def back(g):
        gf = g.reshape(B, Co, H * W)
        dx = np.matmul(wm.T, gf).reshape(x.shape)
        dw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(w.shape)
        return dx, dw

    return make_op(out, (x, w), back)


def depthwise_conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution, weight shape (C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    if w.ndim != 3 or w.shape[0] != C or w.shape[1] != w.shape[2]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[1]
    Ho, Wo = out_size(H, k, stride, padding), out_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"depthwise_conv2d: kernel {k} larger than padded input {x.shape}")
    xp = _pad(x.data, padding)
    wd = w.data
    out = K.depthwise_fwd(xp, wd, stride, Ho, Wo)

    def back(g):
        dxp, dw = K.depthwise_bwd(xp, wd, np.ascontiguousarray(g), stride)
        return _unpad(dxp, padding), dw

    return make_op(out, (x, w), back)


@dataclass
class ConvParams:
    depthwise_kernel: Tensor  # (C, k, k)
    pointwise_kernel: Tensor  # (C_out, C_in, 1, 1)
    stride: int = 1
    padding: int | None = None

    @property
    def k(self) -> int:
        return self.depthwise_kernel.shape[1]

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2 if self.padding is None else self.padding


def separable_conv(x, p: ConvParams) -> Tensor:
    x = as_tensor(x)
    C = x.shape[1]
    if p.depthwise_kernel.shape[0] != C or p.pointwise_kernel.shape[1] != C:
        raise DimensionError(
            f"separable_conv: input channels {C} vs depthwise {p.depthwise_kernel.shape}"
            f" / pointwise {p.pointwise_kernel.shape}")
    if p.k % 2 == 0:
        raise ContractError(f"separable_conv: kernel size must be odd, got {p.k}")
    h = depthwise_conv2d(x, p.depthwise_kernel, p.stride, p.pad)
    return conv2d(h, p.pointwise_kernel)


# -- pooling -------------------------------------------------------------------

def pool(x, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Average or max pooling. Average pooling divides by k*k (padding counts).

    Max pooling routes the gradient to the first maximum in row-major window order.
    """
    x = as_tensor(x)
    B, C, H, W = x.shape
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(f"pool: window {k} larger than input {x.shape} (padding {padding})")
    Ho, Wo = out_size(H, k, stride, padding), out_size(W, k, stride, padding)
    if kind == "avg":
        if k == 1 and padding == 0:
            out = np.ascontiguousarray(x.data[:, :, ::stride, ::stride][:, :, :Ho, :Wo])

            def back_sub(g):
                dx = np.zeros(x.shape)
                dx[:, :, ::stride, ::stride][:, :, :Ho, :Wo] = g
                return (dx,)

            return make_op(out, (x,), back_sub)
        xp = _pad(x.data, padding)
        Hp, Wp = xp.shape[2], xp.shape[3]
        out = K.avgpool_fwd(xp, k, stride, Ho, Wo)
        return make_op(out, (x,), lambda g: (_unpad(K.avgpool_bwd(np.ascontiguousarray(g), k, stride, Hp, Wp),
                                                    padding),))
    if kind == "max":
        xp = _pad(x.data, padding, -np.inf)
        Hp, Wp = xp.shape[2], xp.shape[3]
        out, arg = K.maxpool_fwd(xp, k, stride, Ho, Wo)
        return make_op(out, (x,), lambda g: (_unpad(K.maxpool_bwd(np.ascontiguousarray(g), arg, k, stride, Hp, Wp),
                                                    padding),))
    raise ValueError(f"unknown pool kind {kind!r}")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    return make_op(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),))


def shift_lower_right(x) -> Tensor:
    """Pad one pixel at bottom/right and take the window offset by (+1, +1)."""
    x = as_tensor(x)
    out = np.zeros_like(x.data)
    out[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def back(g):
        dx = np.zeros_like(g)
        dx[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (dx,)

    return make_op(out, (x,), back)


# -- batch norm ------------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPS

    @classmethod
    def create(cls, channels: int, name: str = "bn") -> "BatchNormState":
        return cls(parameter(np.ones(channels), f"{name}.gamma"), parameter(np.zeros(channels), f"{name}.beta"),
                   np.zeros(channels), np.ones(channels))


def batch_norm(x, s: BatchNormState, training: bool, batch_stats: bool = False) -> Tensor:
    """Per-channel normalization of an NCHW tensor followed by gamma/beta.

    ``batch_stats`` normalizes with the batch moments outside training without
    touching the running statistics.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got shape {x.shape}")
    gamma, beta = s.gamma, s.beta
    batch = training or batch_stats
    if batch:
        if x.shape[0] < 2:
            raise ContractError("batch_norm with batch statistics needs batch size >= 2")
        mu, var = K.channel_moments(x.data)
        if training:
            n = x.data.size // x.shape[1]
            s.running_mean = s.momentum * s.running_mean + (1 - s.momentum) * mu
            s.running_var = s.momentum * s.running_var + (1 - s.momentum) * var * (n / (n - 1))
    else:
        mu, var = s.running_mean, s.running_var
    inv = 1.0 / np.sqrt(var + s.epsilon)
    out, xhat = K.affine_norm(x.data, mu, inv, gamma.data, beta.data)
    axes = (0, 2, 3)

    def back(g):
        g = np.ascontiguousarray(g)
        if batch:
            return K.bn_train_bwd(g, xhat, gamma.data, inv)
        scale = (gamma.data * inv)[None, :, None, None]
        return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(out, (x, gamma, beta), back)


# -- dropblock -------------------------------------------------------------------

def dropblock_mask(shape, block_size: int, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask with zeroed block_size x block_size squares around sampled seeds."""
    B, C, H, W = shape
    bs = block_size
    # seed rate chosen so the expected dropped fraction is about 1 - keep_prob
    valid = (H - bs + 1) * (W - bs + 1)
    gamma = (1.0 - keep_prob) / (bs * bs) * (H * W) / valid
    seeds = np.zeros(shape, dtype=bool)
    half = bs // 2
    lo, hi_h, hi_w = half, H - (bs - 1 - half), W - (bs - 1 - half)
    seeds[:, :, lo:hi_h, lo:hi_w] = rng.random((B, C, hi_h - lo, hi_w - lo)) < gamma
    dropped = np.zeros(shape, dtype=bool)
    for i in range(bs):
        for j in range(bs):
            di, dj = i - half, j - half
            src = seeds[:, :, max(0, -di):H - max(0, di), max(0, -dj):W - max(0, dj)]
            dropped[:, :, max(0, di):H - max(0, -di), max(0, dj):W - max(0, -dj)] |= src
    return (~dropped).astype(np.float64)


def dropblock(x, block_size: int, keep_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    H, W = x.shape[2], x.shape[3]
    if block_size > min(H, W) or block_size < 1:
        raise ContractError(f"dropblock: block_size {block_size} invalid for spatial {H}x{W}")
    if not 0 < keep_prob <= 1:
        raise ContractError(f"dropblock: keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    mask = dropblock_mask(x.shape, block_size, keep_prob, rng)
    kept = mask.sum()
    scale = mask * (mask.size / kept) if kept > 0 else mask
    return make_op(x.data * scale, (x,), lambda g: (g * scale,))


# -- dense -----------------------------------------------------------------------

def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with w shape (d_in, d_out)."""
    from .tensor import matmul
    out = matmul(x, w)
    return out + b if b is not None else out
