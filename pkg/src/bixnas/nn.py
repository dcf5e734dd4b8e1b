"""Network operators: convolutions, pooling, resizing, normalisation, fusion, loss.

All 4-d data is laid out batch x channels x height x width. Each operator is a
single tape node with a hand-written backward rule.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .tensor import Tensor, concat, default_dtype, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    """Weights of a convolution.

    Regular convolutions store ``weight`` as out x in x kh x kw; transposed
    convolutions store in x out x kh x kw.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    @property
    def in_ch(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float | None = BN_MOMENTUM
    eps: float = BN_EPS
    batches_tracked: int = 0

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.channels

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def reset_running_stats(self) -> None:
        self.running_mean[...] = 0
        self.running_var[...] = 1
        self.batches_tracked = 0


def make_conv(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, *,
              stride: int = 1, padding: int | None = None, transposed: bool = False,
              dtype=None) -> ConvParams:
    """Kaiming-uniform weights (ReLU gain), zero bias."""
    dtype = dtype or default_dtype()
    if padding is None:
        padding = kernel // 2 if not transposed else 0
    fan_in = in_ch * kernel * kernel
    bound = math.sqrt(6.0 / fan_in)
    shape = (in_ch, out_ch, kernel, kernel) if transposed else (out_ch, in_ch, kernel, kernel)
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch, dtype), requires_grad=True),
                      stride=stride, padding=padding, transposed=transposed)


def make_batch_norm(channels: int, dtype=None) -> BatchNormState:
    dtype = dtype or default_dtype()
    return BatchNormState(Tensor(np.ones(channels, dtype), requires_grad=True),
                          Tensor(np.zeros(channels, dtype), requires_grad=True),
                          np.zeros(channels, dtype), np.ones(channels, dtype))


# -- convolution --------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"extent {n} incompatible with kernel {k}, stride {stride}, padding {pad}")
    return span // stride + 1


def _tap_ranges(n_in: int, n_out: int, offset: int, stride: int):
    # output positions o with 0 <= o*stride + offset < n_in
    lo = 0 if offset >= 0 else (-offset + stride - 1) // stride
    hi = min(n_out - 1, (n_in - 1 - offset) // stride)
    return lo, hi


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a (C*k*k, B*Ho*Wo) matrix so each conv is a single GEMM."""
    b, c, h, w = x.shape
    cols = np.empty((c, k, k, b, ho, wo), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(k):
        r0, r1 = _tap_ranges(h, ho, i - pad, stride)
        for j in range(k):
            c0, c1 = _tap_ranges(w, wo, j - pad, stride)
            tap = cols[:, i, j]
            if r1 < r0 or c1 < c0:
                tap[...] = 0
                continue
            # zero only the padding border of this tap
            tap[:, :, :r0] = 0
            tap[:, :, r1 + 1:] = 0
            tap[:, :, :, :c0] = 0
            tap[:, :, :, c1 + 1:] = 0
            tap[:, :, r0:r1 + 1, c0:c1 + 1] = xt[
                :, :,
                r0 * stride + i - pad:r1 * stride + i - pad + 1:stride,
                c0 * stride + j - pad:c1 * stride + j - pad + 1:stride]
    return cols.reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    dxt = np.zeros((c, b, h, w), dtype=cols.dtype)
    for i in range(k):
        r0, r1 = _tap_ranges(h, ho, i - pad, stride)
        if r1 < r0:
            continue
        for j in range(k):
            c0, c1 = _tap_ranges(w, wo, j - pad, stride)
            if c1 < c0:
                continue
            dxt[:, :,
                r0 * stride + i - pad:r1 * stride + i - pad + 1:stride,
                c0 * stride + j - pad:c1 * stride + j - pad + 1:stride] += cols[:, i, j, :, r0:r1 + 1, c0:c1 + 1]
    return dxt.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of ``x`` with ``p.weight`` plus bias."""
    if p.transposed:
        raise ContractError("conv2d given transposed parameters")
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = p.weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    s, pad = p.stride, p.padding
    ho, wo = _out_extent(h, kh, s, pad), _out_extent(w, kw, s, pad)
    xd, wd = x.data, p.weight.data
    wm = wd.reshape(o, -1)
    if kh == 1 and s == 1 and pad == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        cols = _im2col(xd, kh, s, pad, ho, wo)
    out = wm @ cols
    out += p.bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))
    del cols

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        if kh == 1 and s == 1 and pad == 0:
            cols_ = xd.transpose(1, 0, 2, 3).reshape(c, -1)
            gw = (g2 @ cols_.T).reshape(wd.shape)
            dx = (wm.T @ g2).reshape(c, b, h, w).transpose(1, 0, 2, 3)
        else:
            cols_ = _im2col(xd, kh, s, pad, ho, wo)
            gw = (g2 @ cols_.T).reshape(wd.shape)
            del cols_
            dx = _col2im(wm.T @ g2, xd.shape, kh, s, pad, ho, wo)
        return np.ascontiguousarray(dx), gw, g2.sum(axis=1)

    return Tensor._op(out, (x, p.weight, p.bias), bw)


def conv_transpose2d(x: Tensor, p: ConvParams, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping taps)."""
    if not p.transposed:
        raise ContractError("conv_transpose2d needs transposed parameters")
    b, c, h, w = x.shape
    ci, o, k, _ = p.weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    if k != stride:
        raise ShapeError("conv_transpose2d supports kernel == stride only")
    xd, wd = x.data, p.weight.data
    wm = wd.reshape(ci, o * k * k)
    x3 = xd.reshape(b, c, h * w)
    y = np.matmul(wm.T, x3).reshape(b, o, k, k, h, w)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(b, o, h * k, w * k)
    out = out + p.bias.data[None, :, None, None]

    def bw(g):
        gg = g.reshape(b, o, h, k, w, k).transpose(0, 1, 3, 5, 2, 4).reshape(b, o * k * k, h * w)
        dx = np.matmul(wm, gg).reshape(xd.shape)
        gw = np.tensordot(x3, gg, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gb = g.sum(axis=(0, 2, 3))
        return dx, gw, gb

    return Tensor._op(out, (x, p.weight, p.bias), bw)


# -- pooling and resizing -----------------------------------------------------

def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    if window != 2 or stride != 2:
        raise ContractError("only 2x2 / stride 2 pooling is supported")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d needs even extents, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return Tensor._op(out, (x,), bw)


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype_name: str) -> np.ndarray:
    """Row i holds the align-corners-false linear weights of output i."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    a = a.astype(dtype_name)
    a.setflags(write=False)
    return a


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    return _interp_matrix(n_in, n_out, np.dtype(dtype).name)


def bilinear_resize(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resampling with align_corners=False; identity when sizes match."""
    if target_h < 1 or target_w < 1:
        raise DomainError("resize targets must be >= 1")
    b, c, h, w = x.shape
    if (h, w) == (target_h, target_w):
        return x
    ah = interp_matrix(h, target_h, x.dtype)
    aw = interp_matrix(w, target_w, x.dtype)
    out = np.matmul(ah, np.matmul(x.data, aw.T))

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return Tensor._op(out, (x,), bw)


# -- normalisation ------------------------------------------------------------

def batch_norm(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    c = x.shape[1]
    if c != s.channels:
        raise ShapeError(f"batch_norm: {c} channels, state has {s.channels}")
    xd = x.data
    gamma, beta = s.gamma.data, s.beta.data
    bshape = (1, c, 1, 1)
    if training:
        m = xd.size // c
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean.reshape(bshape)
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + s.eps)
        xhat = xc * inv.reshape(bshape)
        unbiased = var * m / max(m - 1, 1)
        s.batches_tracked += 1
        mom = s.momentum if s.momentum is not None else 1.0 / s.batches_tracked
        s.running_mean *= (1 - mom)
        s.running_mean += mom * mean
        s.running_var *= (1 - mom)
        s.running_var += mom * unbiased
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)

        def bw(g):
            gsum = g.sum(axis=(0, 2, 3))
            gx = (g * xhat).sum(axis=(0, 2, 3))
            dx = (gamma * inv / m).reshape(bshape) * (m * g - gsum.reshape(bshape) - xhat * gx.reshape(bshape))
            return dx, gx, gsum
    else:
        inv = 1.0 / np.sqrt(s.running_var + s.eps)
        xhat = (xd - s.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)

        def bw(g):
            return (g * (gamma * inv).reshape(bshape),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return Tensor._op(out.astype(xd.dtype, copy=False), (x, s.gamma, s.beta), bw)


def conv_unit(x: Tensor, conv: ConvParams, bn: BatchNormState, training: bool) -> Tensor:
    """conv -> batch norm -> ReLU."""
    return relu(batch_norm(conv2d(x, conv), bn, training))


# -- fusion -------------------------------------------------------------------

def average(streams: Sequence[Tensor]) -> Tensor:
    """Element-wise mean, summed left to right then scaled."""
    first = streams[0]
    for t in streams[1:]:
        if t.shape != first.shape:
            raise ShapeError(f"average: shape mismatch {t.shape} vs {first.shape}")
    k = len(streams)
    if k == 1:
        return first
    acc = first.data + streams[1].data
    for t in streams[2:]:
        acc = acc + t.data
    inv = first.dtype.type(1.0 / k)
    out = acc * inv
    return Tensor._op(out, tuple(streams), lambda g: tuple(g * inv for _ in range(k)))


def fuse(streams: Sequence[Tensor], mode: str) -> Tensor:
    if not streams:
        raise ContractError("fuse needs at least one stream")
    if mode == "concat":
        ref = streams[0].shape
        for t in streams:
            if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
                raise ShapeError(f"concat fusion: incompatible shapes {t.shape} vs {ref}")
        if len(streams) == 1:
            return streams[0]
        return concat(list(streams), axis=1)
    if mode == "average":
        return average(streams)
    raise DomainError(f"unknown fusion mode {mode!r}")


def weighted_sum(streams: Sequence[Tensor], weights) -> Tensor:
    """sum_j w_j * x_j accumulated in index order.

    ``weights`` may be a plain sequence of floats or a Tensor of N entries, in
    which case gradients also flow into the weights.
    """
    if not streams:
        raise ContractError("weighted_sum needs at least one stream")
    for t in streams[1:]:
        if t.shape != streams[0].shape:
            raise ShapeError("weighted_sum: shape mismatch")
    dtype = streams[0].dtype
    w_t = weights if isinstance(weights, Tensor) else None
    wv = np.asarray(w_t.data if w_t is not None else weights, dtype=dtype).reshape(-1)
    if wv.size != len(streams):
        raise ShapeError("weighted_sum: one weight per stream required")
    acc = streams[0].data * wv[0]
    for j in range(1, len(streams)):
        acc = acc + streams[j].data * wv[j]
    datas = [t.data for t in streams]

    def bw(g):
        gx = [g * wv[j] for j in range(len(datas))]
        if w_t is None:
            return tuple(gx)
        gw = np.array([(g * d).sum() for d in datas], dtype=dtype).reshape(w_t.shape)
        return (*gx, gw)

    parents = tuple(streams) + ((w_t,) if w_t is not None else ())
    return Tensor._op(acc, parents, bw)


# -- loss ---------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of B x K x H x W logits against class indices."""
    target = np.asarray(target)
    if logits.ndim != 4:
        raise ShapeError("softmax_cross_entropy expects B x K x H x W logits")
    b, k, h, w = logits.shape
    if target.shape != (b, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise DomainError(f"class index outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    t = target.astype(np.intp)[:, None]
    picked = np.take_along_axis(logp, t, axis=1)
    count = b * h * w
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = e / denom
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return Tensor._op(loss, (logits,), bw)


__all__ = [
    "BatchNormState", "ConvParams", "average", "batch_norm", "bilinear_resize", "conv2d",
    "conv_transpose2d", "conv_unit", "fuse", "interp_matrix", "make_batch_norm", "make_conv",
    "max_pool2d", "softmax_cross_entropy", "weighted_sum",
]
