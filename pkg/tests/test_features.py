import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salrec.core import ImagePlane
from salrec.errors import DataError
from salrec.features import (
    DESCRIPTOR_DIM,
    DescriptorSet,
    PruneSpec,
    _axis_weights,
    attach_saliency,
    dense_sift,
    load_descriptors,
    prune_top_fraction,
    read_descriptor_records,
    save_descriptors,
    split_by_threshold,
)
from salrec.saliency import normalize_max1

from .oracles import brute_dense_descriptors


def _random_image(h, w, seed=0):
    return ImagePlane(np.random.default_rng(seed).random((h, w)))


def _toy_set(weights, dims=(10, 10), attached=True, seed=0):
    n = len(weights)
    rng = np.random.default_rng(seed)
    return DescriptorSet(
        xs=rng.uniform(0, dims[0] - 1, n).astype(np.float32),
        ys=rng.uniform(0, dims[1] - 1, n).astype(np.float32),
        scales=np.full(n, 4, dtype=np.float32),
        weights=np.asarray(weights, dtype=np.float32),
        vectors=rng.random((n, DESCRIPTOR_DIM)).astype(np.float32),
        image_dims=dims,
        weights_attached=attached,
    )


class TestDenseSift:
    def test_matches_per_patch_reference(self):
        rng = np.random.default_rng(0)
        img = rng.random((24, 26))
        dset = dense_sift(ImagePlane(img.copy()), step=5, scales=(4,))
        positions, ref = brute_dense_descriptors(img, 4, 5, _axis_weights(4))
        assert np.allclose(np.c_[dset.xs, dset.ys], positions)
        assert np.abs(dset.vectors.astype(np.float64) - ref).max() < 1e-6

    def test_grid_count_formula(self):
        dset = dense_sift(_random_image(64, 64, 1), step=2, scales=(4,))
        assert len(dset) == 625

    def test_count_formula_random_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            h = int(rng.integers(16, 90))
            w = int(rng.integers(16, 90))
            step = int(rng.integers(1, 5))
            scales = sorted(set(rng.integers(2, 8, size=2).tolist()))
            dset = dense_sift(_random_image(h, w, int(rng.integers(1e6))), step=step, scales=tuple(scales))
            expected = 0
            for s in scales:
                ny = (h - 4 * s) // step + 1 if h >= 4 * s else 0
                nx = (w - 4 * s) // step + 1 if w >= 4 * s else 0
                expected += max(ny, 0) * max(nx, 0)
            assert len(dset) == expected

    def test_constant_image_all_zero_vectors(self):
        dset = dense_sift(ImagePlane(np.full((40, 40), 0.3)), step=4, scales=(4, 6))
        assert len(dset) > 0
        assert not dset.vectors.any()

    def test_nonzero_vectors_unit_norm(self):
        dset = dense_sift(_random_image(48, 48, 2), step=4, scales=(4, 6))
        norms = np.linalg.norm(dset.vectors, axis=1)
        nz = norms > 0
        assert nz.any()
        assert np.abs(norms[nz] - 1.0).max() < 1e-6

    def test_canonical_order(self):
        dset = dense_sift(_random_image(40, 40, 4), step=6, scales=(6, 4))
        keys = list(zip(dset.scales.tolist(), dset.ys.tolist(), dset.xs.tolist()))
        assert keys == sorted(keys)

    def test_too_small_image_warns_and_returns_empty(self):
        with pytest.warns(UserWarning, match="too small"):
            dset = dense_sift(ImagePlane(np.zeros((8, 8))), step=2, scales=(4,))
        assert len(dset) == 0

    def test_rejects_color_input(self):
        with pytest.raises(ValueError, match="single-channel"):
            dense_sift(ImagePlane(np.zeros((20, 20, 3))), scales=(4,))


class TestAttachSaliency:
    def test_uniform_map_values(self):
        for c in (0.0, 0.5, 1.0):
            dset = _toy_set(np.zeros(5), attached=False)
            out = attach_saliency(dset, np.full((10, 10), c))
            assert np.all(out.weights == np.float32(c))
            assert out.weights_attached

    def test_pixel_center_sample(self):
        grid = np.arange(12, dtype=np.float64).reshape(3, 4) / 11.0
        dset = DescriptorSet(
            xs=np.array([2.0], dtype=np.float32),
            ys=np.array([1.0], dtype=np.float32),
            scales=np.array([4.0], dtype=np.float32),
            weights=np.array([1.0], dtype=np.float32),
            vectors=np.zeros((1, DESCRIPTOR_DIM), dtype=np.float32),
            image_dims=(4, 3),
        )
        out = attach_saliency(dset, grid)
        assert out.weights[0] == np.float32(grid[1, 2])

    def test_bilinear_between_pixels(self):
        grid = np.array([[0.2, 0.6]])
        dset = DescriptorSet(
            xs=np.array([0.5], dtype=np.float32),
            ys=np.array([0.0], dtype=np.float32),
            scales=np.array([4.0], dtype=np.float32),
            weights=np.array([1.0], dtype=np.float32),
            vectors=np.zeros((1, DESCRIPTOR_DIM), dtype=np.float32),
            image_dims=(2, 1),
        )
        out = attach_saliency(dset, grid)
        assert out.weights[0] == pytest.approx(0.4, abs=1e-7)

    def test_dimension_mismatch(self):
        dset = _toy_set(np.zeros(3))
        with pytest.raises(ValueError, match="does not match"):
            attach_saliency(dset, np.zeros((5, 5)))

    def test_order_and_vectors_unchanged(self):
        dset = _toy_set(np.zeros(6), attached=False)
        out = attach_saliency(dset, normalize_max1(np.random.default_rng(1).random((10, 10))))
        assert np.array_equal(out.xs, dset.xs)
        assert np.array_equal(out.vectors, dset.vectors)


class TestPrune:
    def test_keeps_exact_count_and_ranking(self):
        rng = np.random.default_rng(0)
        dset = _toy_set(rng.random(100))
        out = prune_top_fraction(dset, PruneSpec(0.3))
        assert len(out) == 30
        kept_min = out.weights.min()
        dropped = np.setdiff1d(dset.weights, out.weights)
        if dropped.size:
            assert kept_min >= dropped.max()

    def test_full_fraction_is_identity(self):
        dset = _toy_set(np.random.default_rng(1).random(17))
        out = prune_top_fraction(dset, PruneSpec(1.0))
        assert np.array_equal(out.weights, dset.weights)
        assert np.array_equal(out.vectors, dset.vectors)

    def test_tie_break_prefers_scan_order(self):
        dset = _toy_set([0.5, 0.9, 0.5, 0.5])
        out = prune_top_fraction(dset, PruneSpec(0.5))
        # top-2: the 0.9 and the first 0.5 (index 0)
        assert np.array_equal(out.xs, dset.xs[[0, 1]])

    def test_composition(self):
        dset = _toy_set(np.random.default_rng(2).random(40))
        once = prune_top_fraction(dset, PruneSpec(0.25))
        twice = prune_top_fraction(prune_top_fraction(dset, PruneSpec(0.5)), PruneSpec(0.5))
        assert np.array_equal(once.weights, twice.weights)

    def test_requires_attached_weights(self):
        dset = _toy_set(np.ones(4), attached=False)
        with pytest.raises(ValueError, match="attached"):
            prune_top_fraction(dset, PruneSpec(0.5))

    def test_empty_input(self):
        dset = _toy_set([])
        assert len(prune_top_fraction(dset, PruneSpec(0.5))) == 0

    def test_spec_validates_fraction(self):
        with pytest.raises(ValueError):
            PruneSpec(0.0)
        with pytest.raises(ValueError):
            PruneSpec(1.2)

    def test_robust_ceil_under_float_noise(self):
        dset = _toy_set(np.random.default_rng(3).random(10))
        assert len(prune_top_fraction(dset, PruneSpec(0.7))) == 7


class TestSplit:
    def test_zero_threshold_keeps_all_salient(self):
        dset = _toy_set(np.random.default_rng(0).random(20))
        sal, nonsal = split_by_threshold(dset, 0.0)
        assert len(sal) == 20 and len(nonsal) == 0

    def test_half_split(self):
        sal, nonsal = split_by_threshold(_toy_set([0.4, 0.6]), 0.5)
        assert len(sal) == 1 and len(nonsal) == 1
        assert sal.weights[0] == np.float32(0.6)

    @settings(max_examples=30, deadline=None)
    @given(
        weights=st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=0, max_size=30),
        threshold=st.floats(min_value=0.0, max_value=1.0),
    )
    def test_partition_property(self, weights, threshold):
        dset = _toy_set(weights)
        sal, nonsal = split_by_threshold(dset, threshold)
        assert len(sal) + len(nonsal) == len(dset)
        merged = np.sort(np.concatenate([sal.xs, nonsal.xs]))
        assert np.array_equal(merged, np.sort(dset.xs))
        if len(sal):
            assert sal.weights.min() >= threshold
        if len(nonsal):
            assert nonsal.weights.max() < threshold

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            split_by_threshold(_toy_set([0.5]), 1.5)


class TestDumpFormat:
    def test_roundtrip(self, tmp_path):
        dset = _toy_set(np.random.default_rng(0).random(9))
        path = tmp_path / "d.dset"
        save_descriptors(dset, path)
        back = load_descriptors(path, dset.image_dims)
        assert np.array_equal(back.xs, dset.xs)
        assert np.array_equal(back.weights, dset.weights)
        assert np.array_equal(back.vectors, dset.vectors)

    def test_header_layout(self, tmp_path):
        dset = _toy_set([0.5])
        path = tmp_path / "d.dset"
        save_descriptors(dset, path)
        blob = path.read_bytes()
        assert blob[:4] == b"DSET"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == DESCRIPTOR_DIM
        assert len(blob) == 12 + (4 + DESCRIPTOR_DIM) * 4

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.dset"
        p.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(DataError, match="magic"):
            read_descriptor_records(p)

    def test_truncated_rejected(self, tmp_path):
        dset = _toy_set([0.5, 0.6])
        p = tmp_path / "t.dset"
        save_descriptors(dset, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            read_descriptor_records(p)
