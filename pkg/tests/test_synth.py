"""Forgery generators: mask exactness, determinism, perturbations, I/O."""

import numpy as np
import pytest

from dupscope import netpbm, synth
from dupscope.errors import BadParameter, IoError
from dupscope.synth import AugmentationSpec


def bases(seed, kind="blob", h=64, w=64):
    rng = np.random.default_rng(seed)
    return synth.base_image(kind, h, w, rng), synth.base_image(kind, h, w, rng), rng


class TestBaseImages:
    @pytest.mark.parametrize("kind", synth.BASE_KINDS)
    def test_range_and_shape(self, kind):
        img = synth.base_image(kind, 48, 40, np.random.default_rng(0))
        assert img.shape == (3, 48, 40)
        assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("kind", synth.BASE_KINDS)
    def test_seed_determinism(self, kind):
        a = synth.base_image(kind, 32, 32, np.random.default_rng(7))
        b = synth.base_image(kind, 32, 32, np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_blob_mean_in_range_over_seeds(self):
        means = [
            synth.base_image("blob", 64, 64, np.random.default_rng(s)).mean()
            for s in range(100)
        ]
        assert min(means) >= 0.2 and max(means) <= 0.8

    def test_band_row_autocorrelation_dominates(self):
        img = synth.base_image("band", 64, 64, np.random.default_rng(3))[0]

        def corr(a, b):
            a = a.ravel() - a.mean()
            b = b.ravel() - b.mean()
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))

        along_row = corr(img[:, :-1], img[:, 1:])
        along_col = corr(img[:-1, :], img[1:, :])
        assert along_row > along_col


class TestSynthEDD:
    def test_identity_paste_bit_exact(self):
        b1, b2, rng = bases(1)
        s = synth.synth_edd(b1, b2, AugmentationSpec(), rng)
        sy, sx, rh, rw = s.provenance["source_rect"]
        ty, tx, oh, ow = s.provenance["dest_rect"]
        assert (rh, rw) == (oh, ow)
        src = s.img1[:, sy : sy + rh, sx : sx + rw]
        dst = s.img2[:, ty : ty + oh, tx : tx + ow]
        assert src.tobytes() == dst.tobytes()

    def test_masks_mark_recorded_rects(self):
        b1, b2, rng = bases(2)
        s = synth.synth_edd(b1, b2, AugmentationSpec(), rng)
        sy, sx, rh, rw = s.provenance["source_rect"]
        want1 = np.zeros((64, 64))
        want1[sy : sy + rh, sx : sx + rw] = 1.0
        np.testing.assert_array_equal(s.mask1[0], want1)
        ty, tx, oh, ow = s.provenance["dest_rect"]
        assert s.mask2[0, ty : ty + oh, tx : tx + ow].min() == 1.0
        assert s.mask2.sum() == rh * rw

    def test_changed_pixels_equal_mask_exactly(self):
        b1, b2, rng = bases(3)
        base2 = b2.copy()
        s = synth.synth_edd(b1, b2, AugmentationSpec(), rng)
        changed = np.any(s.img2 != base2, axis=0)
        np.testing.assert_array_equal(changed.astype(float), s.mask2[0])

    def test_scaled_mask_area_within_perimeter_margin(self):
        b1, b2, rng = bases(4)
        spec = AugmentationSpec(scale=1.5, rotation_deg=30.0)
        s = synth.synth_edd(b1, b2, spec, rng)
        sy, sx, rh, rw = s.provenance["source_rect"]
        want = spec.scale**2 * rh * rw
        margin = 2 * spec.scale * 2 * (rh + rw)  # rasterized boundary band
        assert abs(s.mask2.sum() - want) <= margin

    def test_seed_reproducibility(self):
        for _ in range(2):
            b1a, b2a, rng_a = bases(5)
            b1b, b2b, rng_b = bases(5)
            sa = synth.synth_edd(b1a, b2a, AugmentationSpec.sample(rng_a), rng_a)
            sb = synth.synth_edd(b1b, b2b, AugmentationSpec.sample(rng_b), rng_b)
            assert sa.img2.tobytes() == sb.img2.tobytes()
            assert sa.mask2.tobytes() == sb.mask2.tobytes()


class TestSynthIDD:
    def test_masks_split_source_and_dest(self):
        rng = np.random.default_rng(6)
        base = synth.base_image("blob", 64, 128, rng)
        s, full, full_mask = synth.synth_idd_pseudo_pair(
            base, AugmentationSpec(), rng, return_full=True
        )
        sy, sx, rh, rw = s.provenance["source_rect"]
        ty, tx, oh, ow = s.provenance["dest_rect"]
        src_left = sx + rw <= 64
        m_src_half = s.mask1 if src_left else s.mask2
        m_dst_half = s.mask2 if src_left else s.mask1
        assert m_src_half.sum() == rh * rw  # exact source rectangle
        assert m_dst_half.sum() == oh * ow  # identity spec: full footprint
        assert m_src_half.sum() + m_dst_half.sum() == full_mask.sum()

    def test_recombined_halves_reproduce_forged_image(self):
        rng = np.random.default_rng(7)
        base = synth.base_image("band", 64, 128, rng)
        s, full, _ = synth.synth_idd_pseudo_pair(
            base, AugmentationSpec(), rng, return_full=True
        )
        np.testing.assert_array_equal(np.concatenate([s.img1, s.img2], axis=2), full)

    def test_source_and_dest_disjoint(self):
        rng = np.random.default_rng(8)
        base = synth.base_image("gradient", 64, 128, rng)
        s, _, full_mask = synth.synth_idd_pseudo_pair(
            base, AugmentationSpec(), rng, return_full=True
        )
        sy, sx, rh, rw = s.provenance["source_rect"]
        ty, tx, oh, ow = s.provenance["dest_rect"]
        src_cols = set(range(sx, sx + rw))
        dst_cols = set(range(tx, tx + ow))
        left = set(range(64))
        assert src_cols <= left or dst_cols <= left
        assert not (src_cols <= left and dst_cols <= left)


class TestSynthCSTD:
    def test_band_columns(self):
        rng = np.random.default_rng(9)
        a = synth.base_image("blob", 64, 128, rng)
        b = synth.base_image("blob", 64, 128, rng)
        s, full, mask = synth.synth_cstd(a, b, rng, return_full=True)
        c = s.provenance["seam_col"]
        cols = np.where(mask.any(axis=0))[0]
        np.testing.assert_array_equal(cols, [c - 1, c, c + 1])

    def test_sides_match_sources(self):
        rng = np.random.default_rng(10)
        a = synth.base_image("scatter", 64, 128, rng)
        b = synth.base_image("scatter", 64, 128, rng)
        s, full, _ = synth.synth_cstd(a, b, rng, return_full=True)
        c = s.provenance["seam_col"]
        np.testing.assert_array_equal(full[:, :, :c], a[:, :, :c])
        np.testing.assert_array_equal(full[:, :, c:], b[:, :, c:])

    def test_identical_bases_still_labeled(self):
        rng = np.random.default_rng(11)
        a = synth.base_image("band", 64, 128, rng)
        s = synth.synth_cstd(a, a.copy(), rng)
        assert s.mask1.sum() + s.mask2.sum() == 3 * 64


class TestPerturb:
    def test_identities(self):
        img = synth.base_image("blob", 16, 16, np.random.default_rng(12))
        np.testing.assert_array_equal(synth.perturb(img, "brightness", 0.0), img)
        np.testing.assert_allclose(synth.perturb(img, "contrast", 1.0), img, atol=1e-12)
        np.testing.assert_allclose(synth.perturb(img, "blur", 1), img, atol=1e-12)
        np.testing.assert_array_equal(
            synth.perturb(img, "gaussian_noise", 0.0), img
        )

    def test_color_reduce_two_levels_is_binary(self):
        img = synth.base_image("gradient", 16, 16, np.random.default_rng(13))
        out = synth.perturb(img, "color_reduce", 2)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_block_quant_changes_but_stays_bounded(self):
        img = synth.base_image("blob", 16, 16, np.random.default_rng(14))
        out = synth.perturb(img, "block_quant", 4)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_bad_parameters(self):
        img = np.zeros((3, 8, 8))
        with pytest.raises(BadParameter):
            synth.perturb(img, "brightness", 2.0)
        with pytest.raises(BadParameter):
            synth.perturb(img, "blur", 2)
        with pytest.raises(BadParameter):
            synth.perturb(img, "color_reduce", 1)
        with pytest.raises(BadParameter):
            synth.perturb(img, "nonsense", 1)
        with pytest.raises(BadParameter):
            synth.perturb(img, "gaussian_noise", 0.1)  # missing rng


class TestDataset:
    def test_manifest_counts_and_pristine(self, tmp_path):
        out = tmp_path / "ds"
        manifest = synth.build_dataset(out, count=6, seed=3, image_size=32, pristine_frac=1.0)
        assert manifest["count"] == 6
        assert len(manifest["samples"]) == 6
        samples, _ = synth.load_dataset(out)
        for s in samples:
            assert s.mask1.sum() == 0 and s.mask2.sum() == 0

    def test_regeneration_hash_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth.build_dataset(a, count=5, seed=11, image_size=32,
                            task_mix={"edd": 0.5, "idd": 0.3, "cstd": 0.2})
        synth.build_dataset(b, count=5, seed=11, image_size=32,
                            task_mix={"edd": 0.5, "idd": 0.3, "cstd": 0.2})
        assert synth.dataset_digest(a) == synth.dataset_digest(b)

    def test_different_seed_changes_hash(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        synth.build_dataset(a, count=3, seed=1, image_size=32)
        synth.build_dataset(b, count=3, seed=2, image_size=32)
        assert synth.dataset_digest(a) != synth.dataset_digest(b)

    def test_mixed_tasks_round_trip(self, tmp_path):
        out = tmp_path / "ds"
        synth.build_dataset(out, count=9, seed=5, image_size=32,
                            task_mix={"edd": 1, "idd": 1, "cstd": 1})
        samples, manifest = synth.load_dataset(out)
        tasks = {s.task for s in samples}
        assert tasks <= {"edd", "idd", "cstd"}
        for s in samples:
            assert s.img1.shape == (3, 32, 32)
            assert s.mask1.shape == (1, 32, 32)
            assert set(np.unique(s.mask1)) <= {0.0, 1.0}


class TestNetpbm:
    def test_ppm_round_trip(self, tmp_path):
        img = synth.base_image("blob", 10, 12, np.random.default_rng(15))
        p = tmp_path / "x.ppm"
        netpbm.write_ppm(p, img)
        back = netpbm.read_ppm(p)
        want = np.clip(np.rint(img * 255), 0, 255) / 255.0
        np.testing.assert_allclose(back, want, atol=1e-12)

    def test_pgm_round_trip_binary_mask(self, tmp_path):
        mask = (np.random.default_rng(16).random((9, 7)) > 0.5).astype(float)
        p = tmp_path / "m.pgm"
        netpbm.write_pgm(p, mask)
        np.testing.assert_array_equal(netpbm.read_pgm(p), mask)

    def test_write_twice_identical(self, tmp_path):
        img = synth.base_image("band", 8, 8, np.random.default_rng(17))
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        netpbm.write_ppm(p1, img)
        netpbm.write_ppm(p2, img)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n4 4\n255\n\x00\x00")
        with pytest.raises(IoError):
            netpbm.read_ppm(p)
