"""Discretized selective-scan state space model and its normalized variant.

Dynamics are diagonal per channel: each of the C channels carries S
independent first-order states. The per-token step size, input and readout
projections are generated from the token features, so the recurrence is
input-dependent. ``ssm_similarity_encode`` additionally accumulates the
injection weights and divides them out, turning the readout into a
normalized (attention-like) average plus a direct residual.
"""

from __future__ import annotations

import numpy as np

from .errors import NonPositiveDelta
from .nn import Linear
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    cumsum,
    div,
    linear_recurrence,
    reshape,
    softplus,
    texp,
    tsum,
)

_SIM_EPS = 1e-9  # guard for the normalizer denominator


class SSMParams:
    """Diagonal state matrix plus the projections generating per-token
    (delta, input weights, readout weights).

    The state matrix is kept strictly negative via ``A = -exp(a_log)`` so the
    discrete decay exp(delta * A) stays in (0, 1) throughout training. The
    delta projection bias is set so softplus starts near ``delta_init``.

    With ``positive_bc`` the injection and readout projections pass through
    softplus. The normalized encode divides by the accumulated injection
    weights; keeping them positive makes that accumulator strictly
    increasing, so the division is a genuine weighted average instead of a
    near-cancelling ratio.
    """

    def __init__(
        self,
        channels,
        state_dim,
        rng,
        dtype=DEFAULT_DTYPE,
        delta_init=0.1,
        positive_bc=True,
    ):
        self.channels = channels
        self.state_dim = state_dim
        self.positive_bc = positive_bc
        init = np.tile(np.arange(1, state_dim + 1, dtype=dtype), (channels, 1))
        self.a_log = Tensor(np.log(init), requires_grad=True)
        self.d = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.w_delta = Linear(channels, channels, rng, bias=True, dtype=dtype)
        self.w_delta.bias.data[:] = np.log(np.expm1(delta_init))
        self.w_b = Linear(channels, state_dim, rng, bias=False, dtype=dtype)
        self.w_c = Linear(channels, state_dim, rng, bias=False, dtype=dtype)

    @property
    def a(self):
        return -texp(self.a_log)

    def named_params(self):
        ps = [("a_log", self.a_log), ("d", self.d)]
        for sub, layer in (("w_delta", self.w_delta), ("w_b", self.w_b), ("w_c", self.w_c)):
            ps.extend((f"{sub}.{n}", p) for n, p in layer.named_params())
        return ps


def discretize(a, b, delta):
    """Zero-order-hold decay with first-order input approximation.

    Returns (exp(delta * a), delta * b), broadcasting elementwise. ``delta``
    must be strictly positive.
    """
    if np.any(delta.data <= 0):
        raise NonPositiveDelta("delta must be > 0 for discretization")
    return texp(delta * a), delta * b


def _generate(params, v):
    """Per-token discretized tensors, all shaped [B, N, C, S]."""
    b, n, c = v.shape
    s = params.state_dim
    delta = softplus(params.w_delta(v))  # [B,N,C]
    bmat = params.w_b(v)  # [B,N,S]
    cmat = params.w_c(v)  # [B,N,S]
    if params.positive_bc:
        bmat = softplus(bmat)
        cmat = softplus(cmat)
    d4 = reshape(delta, (b, n, c, 1))
    abar, bbar = discretize(params.a, reshape(bmat, (b, n, 1, s)), d4)
    return abar, bbar, reshape(cmat, (b, n, 1, s))


def selective_scan(params, v):
    """Sequential recurrence h_k = Abar_k h_{k-1} + Bbar_k v_k over tokens,
    readout y_k = Cbar_k . h_k + D * v_k. Input and output are [B, N, C].
    """
    b, n, c = v.shape
    abar, bbar, cmat = _generate(params, v)
    inj = bbar * reshape(v, (b, n, c, 1))
    h = linear_recurrence(abar, inj, axis=1)
    return tsum(h * cmat, axis=-1) + params.d * v


def ssm_similarity_encode(params, v):
    """Normalized scan: y_k = (Cbar_k . h_k) / (Cbar_k . n_k) + D * v_k with
    n_k the running sum of the injection weights.

    With constant injection weights and unit decay, the first term reduces to
    the running mean of the readout-projected inputs.
    """
    b, n, c = v.shape
    abar, bbar, cmat = _generate(params, v)
    inj = bbar * reshape(v, (b, n, c, 1))
    h = linear_recurrence(abar, inj, axis=1)
    n_acc = cumsum(bbar, axis=1)
    num = tsum(h * cmat, axis=-1)
    den = tsum(n_acc * cmat, axis=-1)
    return div(num, den, eps=_SIM_EPS) + params.d * v


def scan_explicit(abar, bbar, cmat, d, v, normalize=False):
    """Scan with caller-supplied discretized tensors (no projections).

    abar, bbar: [B,N,C,S]; cmat: [B,N,1,S] or [B,N,C,S]; d: [C]; v: [B,N,C].
    Used by tests and diagnostics to probe the recurrence in isolation.
    """
    b, n, c = v.shape
    inj = bbar * reshape(v, (b, n, c, 1))
    h = linear_recurrence(abar, inj, axis=1)
    num = tsum(h * cmat, axis=-1)
    if normalize:
        den = tsum(cumsum(bbar, axis=1) * cmat, axis=-1)
        num = div(num, den, eps=_SIM_EPS)
    return num + d * v
