"""Affinity pipeline: kernel bounds, softmax structure, duplicate response."""

import numpy as np
import pytest

from dupscope import affinity as aff
from dupscope import nn
from dupscope.errors import KOutOfRange, NonPositiveSigma, NotSquareGrid
from dupscope.ssm import SSMParams
from dupscope.tensor import Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def make_head(c=8, grid=4, seed=0, rope_enabled=True, sigma=2.0, alpha=5.0, topk=3):
    rng = np.random.default_rng(seed)
    return aff.AffinityHead(
        channels=c,
        state_dim=4,
        grid=grid,
        sigma=sigma,
        alpha=alpha,
        topk=topk,
        rng=rng,
        dtype=np.float64,
        rope_enabled=rope_enabled,
    )


class TestTransformFeatures:
    def test_zero_input_gives_unit_rows(self):
        cfg = nn.RoPEConfig(8)
        cb, bb = aff.transform_features(t64(np.zeros((1, 4, 8))), cfg)
        np.testing.assert_allclose(np.linalg.norm(cb.numpy(), axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(bb.numpy(), axis=-1), 1.0, atol=1e-6)

    def test_rows_unit_norm_random(self):
        cfg = nn.RoPEConfig(8)
        x = np.random.default_rng(1).normal(size=(2, 9, 8))
        cb, _ = aff.transform_features(t64(x), cfg)
        np.testing.assert_allclose(np.linalg.norm(cb.numpy(), axis=-1), 1.0, atol=1e-6)

    def test_positive_before_rotation(self):
        cfg = nn.RoPEConfig(8)
        x = np.random.default_rng(2).normal(size=(2, 5, 8)) * 3
        cb, bb = aff.transform_features(t64(x), cfg, rope_enabled=False)
        assert (cb.numpy() > 0).all()
        assert (bb.numpy() > 0).all()


class TestAffinityMatrix:
    def test_self_cosine_diagonal_one(self):
        cfg = nn.RoPEConfig(6)
        x = np.random.default_rng(3).normal(size=(1, 5, 6))
        cb, bb = aff.transform_features(t64(x), cfg, rope_enabled=False)
        m = aff.affinity_matrix(cb, bb).numpy()
        np.testing.assert_allclose(np.diagonal(m, axis1=1, axis2=2), 1.0, atol=1e-6)

    def test_orthogonal_rows_zero(self):
        cb = np.zeros((1, 2, 4))
        cb[0, 0, 0] = 1.0
        cb[0, 1, 1] = 1.0
        m = aff.affinity_matrix(t64(cb), t64(cb)).numpy()
        np.testing.assert_allclose(m[0, 0, 1], 0.0, atol=1e-12)

    def test_matches_cosine_oracle(self):
        cfg = nn.RoPEConfig(6)
        x = np.random.default_rng(4).normal(size=(1, 4, 6))
        cb, bb = aff.transform_features(t64(x), cfg)
        got = aff.affinity_matrix(cb, bb).numpy()
        c, b = cb.numpy(), bb.numpy()
        for i in range(4):
            for j in range(4):
                want = float(c[0, i] @ b[0, j])
                assert abs(got[0, i, j] - want) < 1e-6

    def test_entries_in_unit_interval_magnitude(self):
        head = make_head()
        v = np.random.default_rng(5).normal(size=(2, 16, 8))
        bundle = head(t64(v))
        assert (np.abs(bundle.raw.numpy()) <= 1.0 + 1e-9).all()


class TestSuppressionKernel:
    def test_diagonal_exactly_zero(self):
        k = aff.suppression_kernel(3, 3, 1.5)
        np.testing.assert_array_equal(np.diag(k), 0.0)

    def test_half_at_sigma_distance(self):
        # squared distance sigma^2 gives exactly 1/2
        k = aff.suppression_kernel(1, 2, 1.0)  # two tokens at distance 1
        assert k[0, 1] == pytest.approx(0.5)

    def test_limit_toward_one(self):
        k = aff.suppression_kernel(1, 11, 1.0)  # d=10 -> 100/101
        assert k[0, 10] == pytest.approx(100 / 101)

    def test_monotone_in_distance_and_below_one(self):
        k = aff.suppression_kernel(5, 5, 2.0)
        row = k[0]
        d2 = np.array([(i // 5) ** 2 + (i % 5) ** 2 for i in range(25)])
        order = np.argsort(d2)
        assert (np.diff(row[order]) >= -1e-12).all()
        dmax = d2.max()
        assert row.max() <= dmax / (dmax + 4.0) + 1e-12
        assert row.max() < 1.0

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(NonPositiveSigma):
            aff.suppression_kernel(2, 2, 0.0)


class TestBidirectionalSoftmax:
    def test_uniform_gives_one_over_n_squared(self):
        n = 5
        out = aff.bidirectional_softmax(t64(np.zeros((1, n, n))), alpha=5.0).numpy()
        np.testing.assert_allclose(out, 1.0 / n**2, atol=1e-9)

    def test_symmetric_input_symmetric_output(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(1, 6, 6))
        m = (m + np.swapaxes(m, 1, 2)) / 2
        out = aff.bidirectional_softmax(t64(m), alpha=5.0).numpy()
        np.testing.assert_allclose(out, np.swapaxes(out, 1, 2), atol=1e-6)

    def test_asymmetric_input_asymmetric_output(self):
        m = np.zeros((1, 3, 3))
        m[0, 0, 1] = 1.0  # one-way perturbation
        out = aff.bidirectional_softmax(t64(m), alpha=5.0).numpy()
        assert np.abs(out - np.swapaxes(out, 1, 2)).max() > 1e-4

    def test_row_factor_margin_amplification(self):
        # a margin of delta in scores becomes a factor >= exp(alpha*delta)
        alpha, delta = 5.0, 0.3
        m = np.zeros((1, 1, 4, 4))[:, 0]
        m[0, 0, 1] = 0.5
        m[0, 0, 2] = 0.5 - delta
        row = np.exp(alpha * m[0, 0])
        row = row / row.sum()
        assert row[1] / row[2] >= np.exp(alpha * delta) * (1 - 1e-12)


class TestRefineAffinityMap:
    def test_uniform_final_constant_preconv(self):
        n = 16
        head = make_head(grid=4)
        final = t64(np.full((1, n, n), 1.0 / n**2))
        _, _, topk2d = aff.refine_affinity_map(final, k=n - 1, refiner=head.refiner)
        np.testing.assert_allclose(topk2d.numpy(), 1.0 / n**2, atol=1e-12)

    def test_dominant_pair_peaks_at_both_positions(self):
        n, g = 16, 4
        head = make_head(grid=g)
        final = np.full((1, n, n), 0.001)
        i, j = 2, 11
        final[0, i, j] = final[0, j, i] = 0.9
        _, _, topk2d = aff.refine_affinity_map(t64(final), k=3, refiner=head.refiner)
        flatmap = topk2d.numpy().reshape(n)
        top2 = set(np.argsort(flatmap)[-2:])
        assert top2 == {i, j}

    def test_flat_is_rowmajor_map2d(self):
        head = make_head(grid=4)
        v = np.random.default_rng(7).normal(size=(2, 16, 8))
        bundle = head(t64(v))
        np.testing.assert_array_equal(
            bundle.flat.numpy(), bundle.map2d.numpy().reshape(2, 16)
        )

    def test_not_square_grid_rejected(self):
        head = make_head(grid=4)
        with pytest.raises(NotSquareGrid):
            aff.refine_affinity_map(t64(np.zeros((1, 15, 15))), k=3, refiner=head.refiner)

    def test_k_out_of_range(self):
        head = make_head(grid=4)
        with pytest.raises(KOutOfRange):
            aff.refine_affinity_map(t64(np.zeros((1, 16, 16))), k=16, refiner=head.refiner)


class TestBuildAffinity:
    def test_duplicate_tokens_dominate_raw_row(self):
        # with rotation disabled, an exact duplicated token is the strongest
        # off-diagonal raw match
        head = make_head(rope_enabled=False, seed=8)
        rng = np.random.default_rng(9)
        v = rng.normal(size=(1, 16, 8))
        p, q = 3, 12
        v[0, q] = v[0, p]
        bundle = head(t64(v))
        raw = bundle.raw.numpy()[0].copy()
        np.fill_diagonal(raw, -np.inf)
        assert raw[p].argmax() == q

    def test_suppressed_diagonal_is_zero(self):
        head = make_head(seed=10)
        v = np.random.default_rng(11).normal(size=(1, 16, 8))
        bundle = head(t64(v))
        np.testing.assert_array_equal(
            np.diagonal(bundle.suppressed.numpy(), axis1=1, axis2=2), 0.0
        )

    def test_bundle_invariants_random_input(self):
        head = make_head(rope_enabled=False, seed=12)
        v = np.random.default_rng(13).normal(size=(2, 16, 8))
        bundle = head(t64(v))
        raw = bundle.raw.numpy()
        final = bundle.final.numpy()
        assert (raw >= -1e-9).all()  # positive features, rotation off
        assert (final >= 0).all() and (final <= 1.0 + 1e-9).all()
        # row softmax factor of the final product is stochastic
        scaled = 5.0 * bundle.suppressed.numpy()
        e = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
        rows = e / e.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)

    def test_serializable(self):
        head = make_head(seed=14)
        v = np.random.default_rng(15).normal(size=(1, 16, 8))
        arrays = head(t64(v)).to_arrays()
        assert set(arrays) == {"raw", "suppressed", "final", "topk2d", "map2d", "flat"}
