import math

import numpy as np
import pytest

from mireg import (
    DisplacementField,
    DistortionSpec,
    Volume3D,
    invert_field,
    make_inter_modality_pair,
    mean_endpoint_error,
    metric_mi,
    metric_ncc,
    metric_ssim,
    nested_ellipsoid_phantom,
    simulate_distortion,
    warp,
)

from oracles import binned_entropy, binned_mi, pearson_ncc, ssim_uniform


def rand_volume(dims, seed=0):
    rng = np.random.default_rng(seed)
    return Volume3D(rng.random(dims))


class TestSimulateDistortion:
    def test_zero_magnitude_gives_zero_field(self):
        spec = DistortionSpec(phase_axis="x", max_magnitude=0.0, smoothness_scale=8, seed=1)
        f = simulate_distortion((8, 8, 8), spec)
        assert np.all(f.vectors == 0.0)

    @pytest.mark.parametrize("axis,comp", [("x", 0), ("y", 1), ("z", 2)])
    def test_off_axis_components_zero(self, axis, comp):
        spec = DistortionSpec(phase_axis=axis, max_magnitude=2.0, smoothness_scale=8, seed=2)
        f = simulate_distortion((12, 12, 12), spec)
        for c in range(3):
            if c == comp:
                assert np.any(f.vectors[..., c] != 0.0)
            else:
                assert np.all(f.vectors[..., c] == 0.0)

    def test_deterministic_per_seed(self):
        spec = DistortionSpec(phase_axis="y", max_magnitude=3.0, smoothness_scale=8, seed=42)
        f1 = simulate_distortion((10, 10, 10), spec)
        f2 = simulate_distortion((10, 10, 10), spec)
        assert np.array_equal(f1.vectors, f2.vectors)
        other = simulate_distortion((10, 10, 10), DistortionSpec("y", 3.0, 8, seed=43))
        assert not np.array_equal(f1.vectors, other.vectors)

    def test_max_abs_equals_magnitude_exactly(self):
        spec = DistortionSpec(phase_axis="z", max_magnitude=2.5, smoothness_scale=8, seed=3)
        f = simulate_distortion((16, 16, 16), spec)
        assert np.abs(f.vectors).max() == pytest.approx(2.5, abs=1e-12)

    def test_band_limit_bound_on_forward_differences(self):
        spec = DistortionSpec(phase_axis="y", max_magnitude=2.0, smoothness_scale=8, seed=42)
        f = simulate_distortion((16, 16, 16), spec)
        comp = f.vectors[..., 1]
        bound = 2.0 * math.pi * spec.max_magnitude / spec.smoothness_scale
        for ax in range(3):
            assert np.abs(np.diff(comp, axis=ax)).max() <= bound

    def test_wavelength_longer_than_volume_falls_back_to_constant(self):
        spec = DistortionSpec(phase_axis="x", max_magnitude=1.5, smoothness_scale=64, seed=4)
        f = simulate_distortion((8, 8, 8), spec)
        assert np.allclose(f.vectors[..., 0], 1.5)


class TestInvertField:
    def test_constant_field_inverts_to_negation(self):
        vecs = np.zeros((8, 8, 8, 3))
        vecs[..., 1] = 0.75
        inv = invert_field(DisplacementField(vecs))
        assert np.allclose(inv.vectors[..., 1], -0.75, atol=1e-9)

    def test_inverse_composes_to_identity(self):
        spec = DistortionSpec(phase_axis="y", max_magnitude=2.0, smoothness_scale=16, seed=5)
        f = simulate_distortion((24, 24, 24), spec)
        inv = invert_field(f)
        # psi(u) + f(u + psi(u)) must vanish by construction
        nx, ny, nz = f.dims
        base = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
        pts = (base + inv.vectors).reshape(-1, 3)
        from mireg.warp import _sample

        moved = np.stack(
            [_sample(np.ascontiguousarray(f.vectors[..., c]), pts)[0] for c in range(3)], axis=-1
        )
        residual = inv.vectors.reshape(-1, 3) + moved
        assert np.abs(residual).max() < 1e-9

    def test_steep_field_raises(self):
        spec = DistortionSpec(phase_axis="x", max_magnitude=6.0, smoothness_scale=8, seed=6)
        f = simulate_distortion((16, 16, 16), spec)
        with pytest.raises(ValueError, match="did not converge"):
            invert_field(f, max_iter=50)


class TestInterModalityPair:
    @staticmethod
    def _knot_positions(seed):
        # same interior breakpoints the pair generator draws for this seed
        rng = np.random.default_rng(seed)
        return np.concatenate([[0.0], np.sort(rng.uniform(0.05, 0.95, size=4)), [1.0]])

    def test_identity_remap_zero_noise(self):
        base = rand_volume((6, 6, 6), seed=7)
        # knot values equal to knot positions make the remap the identity
        knots = self._knot_positions(9)
        t1, b0 = make_inter_modality_pair(base, seed=9, breakpoint_values=knots, noise_std=0.0)
        assert np.allclose(b0.data, t1.data, atol=1e-15)

    def test_inverting_remap(self):
        base = rand_volume((8, 8, 8), seed=10)
        knots = self._knot_positions(11)
        t1, b0 = make_inter_modality_pair(base, seed=11, breakpoint_values=1.0 - knots, noise_std=0.0)
        assert np.allclose(b0.data, 1.0 - base.data, atol=1e-15)
        assert metric_ncc(t1, b0) == pytest.approx(-1.0, abs=1e-12)
        assert metric_mi(t1, b0) == pytest.approx(metric_mi(base, base), abs=1e-12)

    def test_default_pair_high_mi_low_correlation(self):
        base = nested_ellipsoid_phantom((24, 24, 24))
        t1, b0 = make_inter_modality_pair(base, seed=42)
        assert np.array_equal(t1.data, base.data)
        assert abs(metric_ncc(t1, b0)) < 0.9
        entropy = metric_mi(base, base)  # binned self-MI is the entropy
        assert metric_mi(t1, b0) > 0.5 * entropy
        assert b0.data.min() >= 0.0 and b0.data.max() <= 1.0

    def test_deterministic(self):
        base = rand_volume((6, 6, 6), seed=12)
        _, b1 = make_inter_modality_pair(base, seed=13)
        _, b2 = make_inter_modality_pair(base, seed=13)
        assert np.array_equal(b1.data, b2.data)


class TestMetricMI:
    def test_four_level_self_mi_is_log4(self):
        rng = np.random.default_rng(14)
        levels = np.array([0.1, 0.35, 0.6, 0.85])
        data = levels[rng.integers(0, 4, size=(8, 8, 8))]
        # exactly equiprobable levels
        data = levels[np.tile(np.arange(4), 128).reshape(8, 8, 8)]
        v = Volume3D(data)
        assert metric_mi(v, v) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_independent_volumes_near_zero(self):
        rng = np.random.default_rng(15)
        a = Volume3D(rng.random((64, 64, 64)))
        b = Volume3D(rng.random((64, 64, 64)))
        assert metric_mi(a, b) < 0.02

    def test_matches_contingency_oracle(self):
        a = rand_volume((5, 5, 5), seed=16)
        b = rand_volume((5, 5, 5), seed=17)
        assert metric_mi(a, b, 8) == pytest.approx(binned_mi(a.data, b.data, 8), abs=1e-12)

    def test_symmetry_and_nonnegativity(self):
        a = rand_volume((6, 6, 6), seed=18)
        b = rand_volume((6, 6, 6), seed=19)
        assert metric_mi(a, b) == pytest.approx(metric_mi(b, a), abs=1e-12)
        assert metric_mi(a, b) >= 0.0

    def test_self_mi_is_binned_entropy(self):
        a = rand_volume((6, 6, 6), seed=20)
        assert metric_mi(a, a, 16) == pytest.approx(binned_entropy(a.data, 16), abs=1e-12)

    def test_invariant_under_bin_relabeling(self):
        a = rand_volume((6, 6, 6), seed=21)
        b = rand_volume((6, 6, 6), seed=22)
        num_bins = 8
        # permute b's bin labels by remapping intensities bin-wise
        rng = np.random.default_rng(23)
        perm = rng.permutation(num_bins)
        idx = np.clip(np.floor(b.data * num_bins).astype(int), 0, num_bins - 1)
        remapped = (perm[idx] + 0.5) / num_bins
        assert metric_mi(a, Volume3D(remapped), num_bins) == pytest.approx(
            metric_mi(a, b, num_bins), abs=1e-12
        )


class TestMetricNccSsim:
    def test_identities(self):
        a = rand_volume((8, 8, 8), seed=24)
        assert metric_ncc(a, a) == pytest.approx(1.0, abs=1e-12)
        assert metric_ssim(a, a) == 1.0

    def test_inverted_image(self):
        a = rand_volume((8, 8, 8), seed=25)
        b = Volume3D(1.0 - a.data)
        assert metric_ncc(a, b) == pytest.approx(-1.0, abs=1e-12)
        assert abs(metric_ncc(a, b)) == pytest.approx(1.0, abs=1e-12)

    def test_match_direct_oracles(self):
        a = rand_volume((9, 9, 9), seed=26)
        b = rand_volume((9, 9, 9), seed=27)
        assert metric_ncc(a, b) == pytest.approx(pearson_ncc(a.data, b.data), abs=1e-10)
        assert metric_ssim(a, b) == pytest.approx(ssim_uniform(a.data, b.data), abs=1e-10)

    def test_ncc_bounded(self):
        for seed in range(5):
            a = rand_volume((6, 6, 6), seed=seed)
            b = rand_volume((6, 6, 6), seed=seed + 50)
            assert abs(metric_ncc(a, b)) <= 1.0 + 1e-12

    def test_ssim_window_larger_than_volume(self):
        with pytest.raises(ValueError, match="window"):
            metric_ssim(rand_volume((5, 5, 5)), rand_volume((5, 5, 5)))

    def test_ncc_zero_variance(self):
        with pytest.raises(ValueError, match="zero variance"):
            metric_ncc(rand_volume((4, 4, 4)), Volume3D(np.full((4, 4, 4), 0.5)))

    def test_ssim_below_one_for_different_images(self):
        a = rand_volume((8, 8, 8), seed=28)
        b = rand_volume((8, 8, 8), seed=29)
        assert metric_ssim(a, b) < 1.0


class TestPhantomAndErrors:
    def test_phantom_three_tissues(self):
        v = nested_ellipsoid_phantom((32, 32, 32), blur_sigma=0.0)
        values = np.unique(v.data)
        assert len(values) == 4  # background + three shells
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0

    def test_phantom_blurred_in_range(self):
        v = nested_ellipsoid_phantom((24, 24, 24))
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0

    def test_mean_endpoint_error(self):
        a = DisplacementField(np.zeros((4, 4, 4, 3)))
        vecs = np.zeros((4, 4, 4, 3))
        vecs[..., 0] = 3.0
        vecs[..., 1] = 4.0
        b = DisplacementField(vecs)
        assert mean_endpoint_error(a, b) == pytest.approx(5.0, abs=1e-12)

    def test_warped_pair_metrics_degrade(self):
        # distortion must lower MI and SSIM against the fixed image
        base = nested_ellipsoid_phantom((24, 24, 24))
        t1, b0 = make_inter_modality_pair(base, seed=30)
        spec = DistortionSpec(phase_axis="y", max_magnitude=2.0, smoothness_scale=16, seed=31)
        truth = simulate_distortion(base.dims, spec)
        distorted = warp(b0, invert_field(truth))
        assert metric_mi(t1, distorted) < metric_mi(t1, b0)
        assert metric_ssim(t1, distorted) < metric_ssim(t1, b0)
