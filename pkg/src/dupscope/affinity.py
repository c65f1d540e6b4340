"""Token-pair affinity pipeline.

Features are contextualized by the normalized state-space scan, made
positive (ELU+1), rotated by position (RoPE), unit-normalized, and compared
by dot product. A distance kernel zeroes self matches and damps near-diagonal
similarity, a two-way temperature softmax keeps only mutual matches, and a
small conv stack refines the per-row top-k summary into a spatial map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveSigma, NotSquareGrid, ShapeMismatch
from .nn import Conv2dLayer, RoPEConfig, l2_normalize, rope
from .ssm import SSMParams, ssm_similarity_encode
from .tensor import DEFAULT_DTYPE, Tensor, elu, matmul, reshape, softmax, topk_row_mean, transpose
from .tensor import silu


def suppression_kernel(grid_h, grid_w, sigma):
    """Distance-ratio kernel d^2 / (d^2 + sigma^2) over all token pairs.

    Exactly 0 on the diagonal, strictly below 1 elsewhere, monotone in
    squared distance. Token coordinates are (row, col) on the grid with unit
    spacing.
    """
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    return d2 / (d2 + sigma * sigma)


@dataclass
class SuppressionKernel:
    """Precomputed kernel for one token grid."""

    grid_h: int
    grid_w: int
    sigma: float

    def __post_init__(self):
        self.matrix = suppression_kernel(self.grid_h, self.grid_w, self.sigma)

    def as_tensor(self, dtype):
        return Tensor(self.matrix.astype(dtype))


@dataclass
class AffinityBundle:
    """All stages of one image's affinity computation.

    raw, suppressed, final: [B,N,N]; topk2d, map2d: [B,1,g,g]; flat: [B,N].
    """

    raw: Tensor
    suppressed: Tensor
    final: Tensor
    topk2d: Tensor
    map2d: Tensor
    flat: Tensor

    def to_arrays(self):
        return {
            "raw": self.raw.numpy(),
            "suppressed": self.suppressed.numpy(),
            "final": self.final.numpy(),
            "topk2d": self.topk2d.numpy(),
            "map2d": self.map2d.numpy(),
            "flat": self.flat.numpy(),
        }


def transform_features(encoded, rope_cfg, rope_enabled=True, proj_c=None, proj_b=None):
    """Positive-shifted, rotated, unit-normalized feature pair for the
    similarity dot product.

    Both outputs are built from the same ELU+1 activation; optional linear
    projections (when configured) differentiate the two branches before
    rotation. Every returned token vector has unit L2 norm.
    """
    pos = elu(encoded) + 1.0
    cb = proj_c(pos) if proj_c is not None else pos
    bb = proj_b(pos) if proj_b is not None else pos
    if rope_enabled:
        cb = rope(cb, rope_cfg)
        bb = rope(bb, rope_cfg)
    return l2_normalize(cb), l2_normalize(bb)


def affinity_matrix(cbar, bbar):
    """Pairwise dot products: [B,N,C] x [B,N,C] -> [B,N,N]."""
    if cbar.shape != bbar.shape:
        raise ShapeMismatch(f"feature shapes differ: {cbar.shape} vs {bbar.shape}")
    return matmul(cbar, transpose(bbar, (0, 2, 1)))


def bidirectional_softmax(affp, alpha):
    """Product of row-wise and column-wise temperature softmaxes.

    Each factor is stochastic along its own axis, so mutual (two-way) matches
    survive while one-way similarity is damped. Symmetric input gives
    symmetric output.
    """
    scaled = affp * float(alpha)
    return softmax(scaled, axis=-1) * softmax(scaled, axis=-2)


class ConvRefiner:
    """Four 3x3 same-pad conv layers (1->8->8->8->1), SiLU after the first three."""

    def __init__(self, rng, hidden=8, dtype=DEFAULT_DTYPE):
        widths = [1, hidden, hidden, hidden, 1]
        self.layers = [
            Conv2dLayer(widths[i], widths[i + 1], 3, rng, padding=1, dtype=dtype)
            for i in range(4)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < 3:
                x = silu(x)
        return x

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"conv{i}.{n}", p) for n, p in layer.named_params())
        return out


def refine_affinity_map(final, k, refiner):
    """Per-row mean of the k strongest off-diagonal entries, reshaped to the
    token grid and refined by the conv stack.

    Returns (map2d [B,1,g,g], flat [B,N], topk2d [B,1,g,g]); ``flat`` is the
    row-major flattening of map2d, topk2d is the pre-conv map.
    """
    b, n, n2 = final.shape
    if n != n2:
        raise ShapeMismatch(f"expected square affinity, got {final.shape}")
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise NotSquareGrid(f"token count {n} is not a perfect square")
    per_row = topk_row_mean(final, k=k, exclude_diag=True)  # [B,N]
    topk2d = reshape(per_row, (b, 1, g, g))
    map2d = refiner(topk2d)
    flat = reshape(map2d, (b, n))
    return map2d, flat, topk2d


def center_tokens(x):
    """Subtract the per-image mean token (common-mode removal).

    Random patch encoders concentrate all tokens around one shared direction,
    which compresses every pairwise cosine into a sliver below 1.0; removing
    the shared component restores a usable margin for exact duplicates."""
    from .tensor import tmean

    return x - tmean(x, axis=1, keepdims=True)


def build_affinity(
    v,
    ssm_params,
    kernel,
    refiner,
    rope_cfg,
    alpha,
    k,
    rope_enabled=True,
    proj_c=None,
    proj_b=None,
    center=True,
):
    """Full pipeline: scan-encode, transform, dot-product, suppress, two-way
    softmax, conv-refine. Returns the complete AffinityBundle."""
    encoded = ssm_similarity_encode(ssm_params, v)
    if center:
        encoded = center_tokens(encoded)
    cbar, bbar = transform_features(encoded, rope_cfg, rope_enabled, proj_c, proj_b)
    raw = affinity_matrix(cbar, bbar)
    n = raw.shape[-1]
    if kernel.matrix.shape[0] != n:
        raise ShapeMismatch(f"kernel built for N={kernel.matrix.shape[0]}, input has N={n}")
    suppressed = raw * kernel.as_tensor(raw.dtype)
    final = bidirectional_softmax(suppressed, alpha)
    map2d, flat, topk2d = refine_affinity_map(final, k, refiner)
    return AffinityBundle(raw, suppressed, final, topk2d, map2d, flat)


class AffinityHead:
    """Stateful affinity pipeline: scan parameters, rotation tables, kernel,
    temperature, top-k and the conv refiner, shared across both images."""

    def __init__(
        self,
        channels,
        state_dim,
        grid,
        sigma,
        alpha,
        topk,
        rng,
        dtype=DEFAULT_DTYPE,
        rope_enabled=True,
        rope_base=10000.0,
        distinct_branch_proj=False,
        center_tokens=True,
    ):
        from .nn import Linear

        self.center_tokens = center_tokens
        self.ssm = SSMParams(channels, state_dim, rng, dtype=dtype)
        self.rope_cfg = RoPEConfig(channels, base=rope_base)
        self.kernel = SuppressionKernel(grid, grid, sigma)
        self.refiner = ConvRefiner(rng, dtype=dtype)
        self.alpha = alpha
        self.topk = topk
        self.rope_enabled = rope_enabled
        if distinct_branch_proj:
            self.proj_c = Linear(channels, channels, rng, bias=False, dtype=dtype)
            self.proj_b = Linear(channels, channels, rng, bias=False, dtype=dtype)
        else:
            self.proj_c = None
            self.proj_b = None

    def __call__(self, v):
        return build_affinity(
            v,
            self.ssm,
            self.kernel,
            self.refiner,
            self.rope_cfg,
            self.alpha,
            self.topk,
            rope_enabled=self.rope_enabled,
            proj_c=self.proj_c,
            proj_b=self.proj_b,
            center=self.center_tokens,
        )

    def named_params(self):
        ps = [(f"ssm.{n}", p) for n, p in self.ssm.named_params()]
        ps += [(f"refiner.{n}", p) for n, p in self.refiner.named_params()]
        if self.proj_c is not None:
            ps += [(f"proj_c.{n}", p) for n, p in self.proj_c.named_params()]
            ps += [(f"proj_b.{n}", p) for n, p in self.proj_b.named_params()]
        return ps
