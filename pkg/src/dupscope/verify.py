"""Runtime property suite: executable checks of the pipeline's algebraic
guarantees, runnable from the CLI on fresh random seeds.

Each family returns its worst observed violation; a family passes when that
stays under its tolerance. The ``sabotage`` hook deliberately injects a
defect so the suite can demonstrate it actually detects failures.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import affinity as aff
from . import nn
from .detector import DuplicationDetector, linear_cross_update, linear_self_update, margin_diagnostic
from .ssm import SSMParams, selective_scan, ssm_similarity_encode
from .tensor import Tensor

SABOTAGE_MODES = ("rope-norm",)


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _detector(seed, grid=4, c=8, **kw):
    kw.setdefault("state_dim", 4)
    kw.setdefault("heads", 2)
    return DuplicationDetector(c, grid, np.random.default_rng(seed), dtype=np.float64, **kw)


# --- families --------------------------------------------------------------


def check_rope_norm(rng, sabotage=None):
    cfg = nn.RoPEConfig(8)
    x = rng.normal(size=(1, 12, 8))
    out = nn.rope(_t(x), cfg).numpy()
    if sabotage == "rope-norm":
        out = out * 1.01  # defective rotation: norms drift
    worst = float(np.abs(np.linalg.norm(out, axis=-1) - np.linalg.norm(x, axis=-1)).max())
    # relative-position property: scores depend only on index offset
    q, k = rng.normal(size=8), rng.normal(size=8)
    seq = np.zeros((1, 16, 8))

    def score(m, n):
        s = seq.copy()
        s[0, m], s[0, n] = q, k
        r = nn.rope(_t(s), cfg).numpy()
        return float(r[0, m] @ r[0, n])

    worst = max(worst, abs(score(1, 6) - score(9, 14)))
    return worst


def check_affinity_positivity(rng, sabotage=None):
    params = SSMParams(8, 4, rng, dtype=np.float64)
    cfg = nn.RoPEConfig(8)
    v = rng.normal(size=(1, 16, 8)) * rng.uniform(0.5, 3.0)
    enc = ssm_similarity_encode(params, _t(v))
    cb, bb = aff.transform_features(enc, cfg, rope_enabled=False)
    raw = aff.affinity_matrix(cb, bb).numpy()
    return float(max(0.0, -raw.min()))


def check_row_stochastic(rng, sabotage=None):
    m = rng.normal(size=(2, 9, 9))
    from .tensor import softmax

    rows = softmax(_t(m * 5.0), axis=-1).numpy().sum(axis=-1)
    return float(np.abs(rows - 1.0).max())


def check_kernel_bound(rng, sabotage=None):
    g = int(rng.integers(3, 7))
    sigma = float(rng.uniform(0.5, 4.0))
    k = aff.suppression_kernel(g, g, sigma)
    worst = float(np.abs(np.diag(k)).max())  # diagonal must be exactly 0
    d2max = 2 * (g - 1) ** 2
    bound = d2max / (d2max + sigma * sigma)
    worst = max(worst, float(max(0.0, k.max() - bound)))
    worst = max(worst, float(max(0.0, -k.min())))
    return worst


def check_symmetry(rng, sabotage=None):
    m = rng.normal(size=(1, 8, 8))
    sym = (m + np.swapaxes(m, 1, 2)) / 2
    out = aff.bidirectional_softmax(_t(sym), 5.0).numpy()
    worst = float(np.abs(out - np.swapaxes(out, 1, 2)).max())
    asym = sym.copy()
    asym[0, 0, 1] += 1.0
    out2 = aff.bidirectional_softmax(_t(asym), 5.0).numpy()
    broke = float(np.abs(out2 - np.swapaxes(out2, 1, 2)).max())
    if broke < 1e-6:
        worst = max(worst, 1.0)  # asymmetry must be visible in the output
    return worst


def check_cross_consistency(rng, sabotage=None):
    d = _detector(int(rng.integers(0, 2**31)))
    v = _t(rng.normal(size=(1, 16, 8)))
    out = d.detect(v, v)
    return float(np.abs(out.v1p.numpy() - out.v2p.numpy()).max())


def check_dimension_preservation(rng, sabotage=None):
    d = _detector(int(rng.integers(0, 2**31)))
    shape = (int(rng.integers(1, 3)), 16, 8)
    v1, v2 = _t(rng.normal(size=shape)), _t(rng.normal(size=shape))
    out = d.detect(v1, v2)
    ok = all(t.shape == shape for t in (out.v1p, out.v2p, out.self1, out.self2))
    return 0.0 if ok else 1.0


def check_linear_span(rng, sabotage=None):
    worst = 0.0
    for n, c in ((4, 3), (4, 16)):
        v1 = rng.normal(size=(1, n, c))
        v2 = rng.normal(size=(1, n, c))
        aff_row = rng.uniform(0, 1, size=(1, n, n))
        fhat = linear_self_update(v1, aff_row) + linear_cross_update(v1, v2)
        basis = np.concatenate([v1[0], v2[0]], axis=0)  # 2n rows in R^c
        coef, *_ = np.linalg.lstsq(basis.T, fhat[0].T, rcond=None)
        recon = (basis.T @ coef).T
        worst = max(worst, float(np.abs(recon - fhat[0]).max()))
    return worst


def check_localized_amplification(rng, sabotage=None):
    n, c = 6, 8
    v = rng.normal(size=(1, n, c))
    i, j = 1, 4
    row = np.full(n, 0.01)
    row[j] = 0.9
    a = np.full((1, n, n), 0.005)
    a[0, i] = row
    out = linear_self_update(v, a)
    gamma = a[0, i, j]
    eps_term = sum(a[0, i, k] * v[0, k] for k in range(n) if k != j)
    lhs = np.linalg.norm(out[0, i] - v[0, i] - gamma * v[0, j])
    return float(max(0.0, lhs - np.linalg.norm(eps_term)))


def check_margin_bound(rng, sabotage=None):
    d = _detector(int(rng.integers(0, 2**31)))
    v1 = _t(rng.normal(size=(1, 16, 8)))
    v2 = _t(rng.normal(size=(1, 16, 8)))
    out = d.detect(v1, v2, collect_margin=True)
    return float(max(0.0, out.margin_report.max_violation()))


def check_margin_amplification(rng, sabotage=None):
    alpha = 5.0
    worst = 0.0
    mha = nn.MultiHeadAttention(8, 2, np.random.default_rng(int(rng.integers(0, 2**31))), dtype=np.float64)
    for delta in (0.1, 0.5, 1.0):
        scores = rng.normal(size=4) * 0.0
        scores[1] = delta  # margin over index 0
        row = np.exp(alpha * scores)
        row = row / row.sum()
        ratio = row[1] / row[0]
        required = np.exp(alpha * delta) * (1 - 1e-9)
        worst = max(worst, float(max(0.0, required - ratio)))
    return worst


def check_scan_oracle(rng, sabotage=None):
    params = SSMParams(3, 4, np.random.default_rng(int(rng.integers(0, 2**31))), dtype=np.float64)
    v = rng.normal(size=(1, 6, 3))
    got_plain = selective_scan(params, _t(v)).numpy()
    got_norm = ssm_similarity_encode(params, _t(v)).numpy()

    delta = np.logaddexp(0.0, v @ params.w_delta.weight.numpy() + params.w_delta.bias.numpy())
    bmat = np.logaddexp(0.0, v @ params.w_b.weight.numpy())
    cmat = np.logaddexp(0.0, v @ params.w_c.weight.numpy())
    a = -np.exp(params.a_log.numpy())
    dvec = params.d.numpy()
    want_plain = np.zeros_like(v)
    want_norm = np.zeros_like(v)
    h = np.zeros((3, 4))
    nacc = np.zeros((3, 4))
    for k in range(6):
        abar = np.exp(delta[0, k][:, None] * a)
        bbar = delta[0, k][:, None] * bmat[0, k][None, :]
        h = abar * h + bbar * v[0, k][:, None]
        nacc = nacc + bbar
        want_plain[0, k] = h @ cmat[0, k] + dvec * v[0, k]
        den = nacc @ cmat[0, k]
        den = np.where(den < 0, -1.0, 1.0) * np.maximum(np.abs(den), 1e-9)
        want_norm[0, k] = h @ cmat[0, k] / den + dvec * v[0, k]
    return float(
        max(np.abs(got_plain - want_plain).max(), np.abs(got_norm - want_norm).max())
    )


FAMILIES = [
    ("rope-norm", check_rope_norm, 1e-6),
    ("affinity-positivity", check_affinity_positivity, 1e-9),
    ("row-stochastic", check_row_stochastic, 1e-6),
    ("kernel-bound", check_kernel_bound, 1e-12),
    ("symmetry", check_symmetry, 1e-6),
    ("cross-consistency", check_cross_consistency, 1e-6),
    ("dimension-preservation", check_dimension_preservation, 0.5),
    ("linear-span", check_linear_span, 1e-8),
    ("localized-amplification", check_localized_amplification, 1e-9),
    ("margin-bound", check_margin_bound, 1e-6),
    ("margin-amplification", check_margin_amplification, 1e-9),
    ("scan-oracle", check_scan_oracle, 1e-9),
]


def run_property_suite(seed=0, trials=50, sabotage=None):
    """Run every family on ``trials`` fresh seeds; returns a list of dicts."""
    if sabotage is not None and sabotage not in SABOTAGE_MODES:
        raise ValueError(f"unknown sabotage mode '{sabotage}'")
    results = []
    for name, fn, tol in FAMILIES:
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng((seed, t, zlib.crc32(name.encode())))
            worst = max(worst, fn(rng, sabotage=sabotage))
        results.append(
            {
                "family": name,
                "trials": trials,
                "max_violation": worst,
                "tolerance": tol,
                "passed": bool(worst <= tol),
            }
        )
    return results
