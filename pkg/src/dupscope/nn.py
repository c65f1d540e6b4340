"""Neural building blocks: convolutions, attention, RoPE, normalization.

Layers hold their parameters as ``Tensor``s and expose ``named_params()``
so models can collect them for the optimizer and for checkpoints. All
forward paths are built either from tensor-core ops or from fused ops with
hand-written backward passes (convolutions, upsampling, rotary embedding);
both routes are covered by gradient checks in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidRate, InvalidTarget, OddDimension, ShapeMismatch
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    broadcast_to,
    div,
    elu,
    matmul,
    reshape,
    silu,
    softmax,
    tmean,
    transpose,
    tsqrt,
    tsum,
)


def _param(rng, shape, scale, dtype):
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# linear / norm
# ---------------------------------------------------------------------------


class Linear:
    """y = x @ W + b over the last axis."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=DEFAULT_DTYPE):
        limit = float(np.sqrt(6.0 / (in_dim + out_dim)))
        self.weight = _param(rng, (in_dim, out_dim), limit, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def named_params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps


class LayerNorm:
    """Layer normalization over the last axis with learnable scale/shift."""

    def __init__(self, dim, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return standardize(x) * self.gamma + self.beta

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def standardize(x, eps=1e-5):
    """Zero-mean unit-variance along the last axis, no learnable parameters."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered / tsqrt(var + eps)


class MLP:
    """Two-layer feed-forward with SiLU."""

    def __init__(self, dim, hidden, rng, dtype=DEFAULT_DTYPE):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(silu(self.fc1(x)))

    def named_params(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.named_params()] + [
            (f"fc2.{n}", p) for n, p in self.fc2.named_params()
        ]


# ---------------------------------------------------------------------------
# convolutions (fused ops)
# ---------------------------------------------------------------------------


def _window_view(xp, kh, kw, sh, sw):
    b, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    shape = (b, c, oh, ow, kh, kw)
    strides = (s0, s1, s2 * sh, s3 * sw, s2, s3)
    return np.lib.stride_tricks.as_strided(xp, shape, strides), oh, ow


def conv2d_op(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(
            f"conv2d channel mismatch: input {x.shape[1]} vs weight {weight.shape[1]}"
        )
    kh, kw = weight.shape[2], weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win, oh, ow = _window_view(xp, kh, kw, stride, stride)
    out = np.einsum("bcijuv,ocuv->boij", win, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    wd = weight.data
    xshape = x.shape

    def backward(g):
        gw = np.einsum("boij,bcijuv->ocuv", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gslice = np.einsum("boij,oc->bcij", g, wd[:, :, u, v], optimize=True)
                gxp[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += gslice
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        grads = [gx.reshape(xshape), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, "conv2d", parents, backward)


def depthwise_conv2d_op(x, weight):
    """Per-channel convolution with same-size output (odd kernel, same pad)."""
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(
            f"depthwise channel mismatch: input {x.shape[1]} vs weight {weight.shape[0]}"
        )
    k = weight.shape[2]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win, oh, ow = _window_view(xp, k, k, 1, 1)
    wd = weight.data[:, 0]  # [C, k, k]
    out = np.einsum("bcijuv,cuv->bcij", win, wd, optimize=True)
    xshape = x.shape

    def backward(g):
        gw = np.einsum("bcij,bcijuv->cuv", g, win, optimize=True)[:, None]
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gxp[:, :, u : u + oh, v : v + ow] += g * wd[None, :, u, v, None, None]
        gx = gxp[:, :, pad:-pad, pad:-pad] if pad else gxp
        return [gx.reshape(xshape), gw]

    return Tensor._result(out, "depthwise_conv2d", (x, weight), backward)


class Conv2dLayer:
    """Learned 2-d cross-correlation with stride and zero padding."""

    def __init__(self, in_c, out_c, k, rng, stride=1, padding=0, bias=True, dtype=DEFAULT_DTYPE):
        std = float(np.sqrt(2.0 / (in_c * k * k)))
        self.weight = Tensor(
            (rng.standard_normal((out_c, in_c, k, k)) * std).astype(dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d_op(x, self.weight, self.bias, self.stride, self.padding)

    def named_params(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps


class DepthwiseConvLayer:
    """Per-channel k x k convolution, shape preserving (same padding)."""

    def __init__(self, channels, k, rng, dtype=DEFAULT_DTYPE):
        if k % 2 == 0:
            raise ShapeMismatch("depthwise kernel size must be odd for same padding")
        std = float(np.sqrt(2.0 / (k * k)))
        self.weight = Tensor(
            (rng.standard_normal((channels, 1, k, k)) * std).astype(dtype), requires_grad=True
        )

    def __call__(self, x):
        return depthwise_conv2d_op(x, self.weight)

    def named_params(self):
        return [("weight", self.weight)]


def conv2d(layer, x):
    return layer(x)


def depthwise_conv(layer, x):
    return layer(x)


# ---------------------------------------------------------------------------
# rotary positional embedding
# ---------------------------------------------------------------------------


class RoPEConfig:
    """Rotation tables for interleaved feature pairs over 1-d token index."""

    def __init__(self, dim, base=10000.0):
        if dim % 2 != 0:
            raise OddDimension(f"rotary dim must be even, got {dim}")
        self.dim = dim
        self.base = base
        self._tables = {}

    def tables(self, n, dtype):
        key = (n, np.dtype(dtype).name)
        if key not in self._tables:
            half = self.dim // 2
            inv = self.base ** (-2.0 * np.arange(half) / self.dim)
            ang = np.arange(n)[:, None] * inv[None, :]
            self._tables[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        return self._tables[key]


def rope(x, cfg):
    """Rotate consecutive feature pairs (2i, 2i+1) by angle pos/base^(2i/dim).

    Norm preserving per pair; positions are the flattened token indices.
    """
    if x.shape[-1] != cfg.dim:
        raise ShapeMismatch(f"rope dim {cfg.dim} vs input {x.shape[-1]}")
    n = x.shape[-2]
    cos, sin = cfg.tables(n, x.dtype)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return Tensor._result(out, "rope", (x,), backward)


def l2_normalize(x, eps=1e-12):
    """Unit-norm rows along the last axis."""
    norm = tsqrt(tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def linear_attention(q, kv):
    """Kernelized attention with the ELU+1 feature map.

    out(i) = phi(q_i)^T (sum_j phi(kv_j) kv_j^T) / (phi(q_i)^T sum_j phi(kv_j));
    keys and values are both taken from ``kv``, and phi > 0 keeps the
    denominator strictly positive.
    """
    if q.shape[-2] != kv.shape[-2]:
        raise ShapeMismatch(f"linear_attention token counts differ: {q.shape} vs {kv.shape}")
    phi_q = elu(q) + 1.0
    phi_k = elu(kv) + 1.0
    kv_mat = matmul(transpose(phi_k, (0, 2, 1)), kv)  # [B,C,C]
    num = matmul(phi_q, kv_mat)  # [B,N,C]
    ksum = tsum(phi_k, axis=1, keepdims=True)  # [B,1,C]
    den = matmul(phi_q, transpose(ksum, (0, 2, 1)))  # [B,N,1]
    return div(num, den)


class MultiHeadAttention:
    """Standard softmax attention split over heads, no projection biases."""

    def __init__(self, dim, heads, rng, dtype=DEFAULT_DTYPE):
        if dim % heads != 0:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.head_dim = dim // heads
        limit = float(np.sqrt(6.0 / (2 * dim)))
        self.wq = _param(rng, (dim, dim), limit, dtype)
        self.wk = _param(rng, (dim, dim), limit, dtype)
        self.wv = _param(rng, (dim, dim), limit, dtype)
        self.wo = _param(rng, (dim, dim), limit, dtype)

    def _split(self, x, b, n):
        return transpose(reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q, k, v, extra_scores=None, return_internals=False):
        """extra_scores: optional [B,N,N] additive bias applied to every head."""
        if q.shape != k.shape or k.shape != v.shape:
            raise ShapeMismatch(f"attention shapes differ: {q.shape}, {k.shape}, {v.shape}")
        b, n, c = q.shape
        qh = self._split(matmul(q, self.wq), b, n)
        kh = self._split(matmul(k, self.wk), b, n)
        vh = self._split(matmul(v, self.wv), b, n)
        scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        if extra_scores is not None:
            scores = scores + reshape(extra_scores, (b, 1, n, n))
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, vh)  # [B,h,N,d]
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, c))
        out = matmul(merged, self.wo)
        if return_internals:
            return out, {"scores": scores, "attn": attn, "values": vh}
        return out

    def named_params(self):
        return [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)]


def multi_head_attention(mha, q, k, v):
    return mha(q, k, v)


# ---------------------------------------------------------------------------
# resizing / regularization
# ---------------------------------------------------------------------------


def _interp_matrix(dst, src, dtype):
    # align-corners=false sampling with edge clamping; rows sum to 1
    m = np.zeros((dst, src), dtype=dtype)
    if src == 1:
        m[:, 0] = 1.0
        return m
    scale = src / dst
    for i in range(dst):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center))
        frac = center - lo
        lo_c = min(max(lo, 0), src - 1)
        hi_c = min(max(lo + 1, 0), src - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_upsample(x, out_h, out_w):
    """Resize [B,C,h,w] to [B,C,out_h,out_w] by bilinear interpolation."""
    if x.ndim != 4:
        raise ShapeMismatch("bilinear_upsample expects [B,C,H,W]")
    h, w = x.shape[2], x.shape[3]
    if out_h < h or out_w < w:
        raise InvalidTarget(f"target ({out_h},{out_w}) smaller than input ({h},{w})")
    mr = _interp_matrix(out_h, h, x.dtype)
    mc = _interp_matrix(out_w, w, x.dtype)
    out = np.einsum("Hh,bchw,Ww->bcHW", mr, x.data, mc, optimize=True)

    def backward(g):
        return (np.einsum("Hh,bcHW,Ww->bchw", mr, g, mc, optimize=True),)

    return Tensor._result(out, "bilinear_upsample", (x,), backward)


def drop_path(x, rate, training, rng=None):
    """Per-sample stochastic depth: keep with prob 1-rate, rescale kept paths.

    rate == 1 is the deterministic branch-ablation case (always dropped, no
    rescale); stochastic rates live in [0, 1).
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidRate(f"drop_path rate must be in [0, 1], got {rate}")
    if not training or rate == 0.0:
        return x
    if rate == 1.0:
        return x * Tensor(np.zeros((1,), dtype=x.dtype))
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    mask = keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    return x * Tensor(mask)


def lift_channels(flat, channels):
    """Broadcast a [B,N] signal to [B,N,C] (single channel repeated)."""
    b, n = flat.shape
    return broadcast_to(reshape(flat, (b, n, 1)), (b, n, channels))
