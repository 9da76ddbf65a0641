"""
Tests for grain fields, the optical forward models, PCA reduction,
normalization and observation masks
"""
import numpy as np
import pytest

from exceptions import DataError, ForwardModelError
from synthetic_data import (
    NormalizationMap,
    PcaModel,
    build_forward,
    channels_to_orientation,
    doubled_angle,
    fit_rotation_pca,
    normalize_apply,
    normalize_fit,
    normalize_invert,
    observed_count,
    orientation_to_channels,
    pca_apply,
    pca_fit,
    pca_invert,
    pl_like_forward,
    polarizer_intensities,
    project_to_unit,
    random_entry_mask,
    random_mask,
    rotation_series_forward,
    sample_grain_field,
    sample_main_fields,
)


class TestGrainField:
    """Test Voronoi grain sampling"""

    def test_shapes_and_ranges(self):
        """Test grid shapes, angle range and grain ids"""
        field = sample_grain_field(8, 6, 5, seed=0)
        assert field.theta.shape == (8, 6)
        assert field.n_grains == 5
        assert np.all((field.theta >= 0.0) & (field.theta < 2.0 * np.pi))
        assert field.grain_id.min() >= 0 and field.grain_id.max() < 5

    def test_pixels_join_nearest_seed(self):
        """Test each pixel center is no farther from its own seed than from any other"""
        field = sample_grain_field(7, 9, 4, seed=3)
        for i in range(7):
            for j in range(9):
                center = np.array([i + 0.5, j + 0.5])
                distances = np.linalg.norm(field.seed_points - center, axis=1)
                assert distances[field.grain_id[i, j]] == pytest.approx(distances.min())

    def test_orientation_constant_within_grain(self):
        """Test every pixel carries its grain's angle"""
        field = sample_grain_field(6, 6, 3, seed=8)
        np.testing.assert_array_equal(field.theta, field.seed_angles[field.grain_id])

    def test_single_grain(self):
        """Test K = 1 gives a uniform field"""
        field = sample_grain_field(5, 5, 1, seed=2)
        assert np.unique(field.theta).size == 1

    def test_deterministic(self):
        """Test equal seeds give equal fields"""
        a = sample_grain_field(5, 5, 3, seed=11)
        b = sample_grain_field(5, 5, 3, seed=11)
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_invalid_sizes(self):
        """Test zero grains are rejected"""
        with pytest.raises(ValueError):
            sample_grain_field(4, 4, 0, seed=0)

    def test_main_fields_stack(self):
        """Test batched sampling uses consecutive seeds"""
        fields = sample_main_fields(3, 3, 2, 4, base_seed=10)
        assert fields.shape == (4, 3, 3, 2)
        np.testing.assert_allclose(fields[2], orientation_to_channels(sample_grain_field(3, 3, 2, 12).theta))


class TestOrientationChannels:
    """Test the (cos, sin) embedding"""

    def test_round_trip(self):
        """Test angles survive the embedding"""
        theta = np.array([[0.0, 1.0], [3.0, 6.0]])
        np.testing.assert_allclose(channels_to_orientation(orientation_to_channels(theta)), theta)

    def test_projection_to_unit(self):
        """Test scaled vectors are pulled back onto the circle"""
        projected = project_to_unit(np.array([[[3.0, 4.0]]]))
        np.testing.assert_allclose(projected, [[[0.6, 0.8]]])


class TestForwardModels:
    """Test the doubled-angle and polarizer models"""

    def test_doubled_angle_values(self):
        """Test theta = pi/4 maps to (0, 1)"""
        out = doubled_angle(orientation_to_channels(np.full((1, 1), np.pi / 4)))
        np.testing.assert_allclose(out[0, 0], [0.0, 1.0], atol=1e-12)

    def test_antipodal_ambiguity(self):
        """Test theta and theta + pi give the same auxiliary output"""
        theta = np.random.default_rng(0).uniform(0.0, 2.0 * np.pi, size=(4, 4))
        f = pl_like_forward()
        np.testing.assert_allclose(
            f(orientation_to_channels(theta)), f(orientation_to_channels(theta + np.pi)), atol=1e-12
        )

    def test_rejects_non_unit_vectors(self):
        """Test inputs off the unit circle are rejected"""
        with pytest.raises(ForwardModelError):
            doubled_angle(np.full((2, 2, 2), 0.5))

    def test_rejects_wrong_channel_count(self):
        """Test the main field must have two channels"""
        with pytest.raises(ForwardModelError):
            doubled_angle(np.ones((2, 2, 3)))

    def test_polarizer_intensities(self):
        """Test I_j = cos(2 (theta - phi_j))"""
        theta = np.array([[0.4]])
        out = polarizer_intensities(orientation_to_channels(theta), n_rotations=4)
        phis = np.arange(4) * np.pi / 4
        np.testing.assert_allclose(out[0, 0], np.cos(2.0 * (0.4 - phis)))

    def test_rotation_series_wrapper(self):
        """Test the rotations black box reports its channel count"""
        f = rotation_series_forward(5)
        assert f.aux_channels == 5
        assert f(orientation_to_channels(np.zeros((2, 3)))).shape == (2, 3, 5)

    def test_build_forward(self):
        """Test model selection by name"""
        assert build_forward("doubled").identifier == "pl-doubled-angle"
        with pytest.raises(DataError):
            build_forward("rotations")
        with pytest.raises(DataError):
            build_forward("xray")


class TestPca:
    """Test standardized PCA"""

    def test_line_data(self):
        """Test points on a line give one component along it with all the variance"""
        t = np.linspace(-1.0, 1.0, 21)
        data = np.column_stack([t, 2.0 * t + 1.0])
        model = pca_fit(data, 1)
        np.testing.assert_allclose(model.components[0], [1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)], atol=1e-12)
        np.testing.assert_allclose(model.explained, [1.0], atol=1e-12)

    def test_round_trip_with_all_components(self):
        """Test apply then invert reproduces the data when k = C"""
        data = np.random.default_rng(1).standard_normal((50, 3)) @ np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.3], [0.2, 0.0, 1.0]])
        model = pca_fit(data, 3, unique=False)
        np.testing.assert_allclose(pca_invert(model, pca_apply(model, data)), data, atol=1e-10)

    def test_components_orthonormal(self):
        """Test component rows are orthonormal"""
        data = np.random.default_rng(2).standard_normal((40, 4))
        model = pca_fit(data, 3)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-10)
        assert np.all(np.diff(model.explained) <= 1e-12)

    def test_constant_channel_dropped(self):
        """Test a zero-variance channel gets no weight and returns at its mean"""
        rng = np.random.default_rng(3)
        data = np.column_stack([rng.standard_normal(30), np.full(30, 7.0), rng.standard_normal(30)])
        model = pca_fit(data, 2)
        assert list(model.kept) == [True, False, True]
        np.testing.assert_array_equal(model.components[:, 1], 0.0)
        restored = pca_invert(model, pca_apply(model, data))
        np.testing.assert_allclose(restored[:, 1], 7.0)

    def test_too_few_rows(self):
        """Test fewer vectors than channels is rejected"""
        with pytest.raises(DataError):
            pca_fit(np.ones((2, 3)), 1)

    def test_k_out_of_range(self):
        """Test k must lie in [1, C]"""
        with pytest.raises(ValueError):
            pca_fit(np.random.default_rng(0).standard_normal((10, 2)), 3)

    def test_dict_round_trip(self):
        """Test the manifest form reloads the same model"""
        model = pca_fit(np.random.default_rng(4).standard_normal((20, 3)), 2)
        restored = PcaModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(restored.components, model.components)
        np.testing.assert_array_equal(restored.kept, model.kept)

    def test_rotation_pca_recovers_two_dimensions(self):
        """Test polarizer series of planar orientations span two principal directions"""
        fields = sample_main_fields(6, 6, 4, 10, base_seed=0)
        model = fit_rotation_pca(fields, 6, 2)
        assert model.explained.sum() == pytest.approx(1.0, abs=1e-8)
        f = build_forward("rotations", 6, model)
        assert f.aux_channels == 2
        assert f(fields[0]).shape == (6, 6, 2)


class TestNormalization:
    """Test the per-channel affine map"""

    def test_maps_range_to_unit_interval(self):
        """Test training min and max go to -1 and +1"""
        data = np.array([[[0.0, 10.0]], [[2.0, 30.0]], [[1.0, 20.0]]])
        norm = normalize_fit(data)
        out = normalize_apply(norm, data)
        np.testing.assert_allclose(out.min(axis=(0, 1)), [-1.0, -1.0])
        np.testing.assert_allclose(out.max(axis=(0, 1)), [1.0, 1.0])
        np.testing.assert_allclose(normalize_invert(norm, out), data)

    def test_out_of_range_extrapolates(self):
        """Test values past the training range map past +1"""
        norm = NormalizationMap(mins=np.array([0.0]), maxs=np.array([1.0]))
        assert normalize_apply(norm, np.array([2.0]))[0] == pytest.approx(3.0)

    def test_constant_channel_rejected(self):
        """Test a constant channel cannot be normalized"""
        with pytest.raises(DataError):
            normalize_fit(np.ones((4, 2)))

    def test_dict_round_trip(self):
        """Test the manifest form reloads the same map"""
        norm = NormalizationMap(mins=np.array([-1.0, 0.0]), maxs=np.array([1.0, 4.0]))
        restored = NormalizationMap.from_dict(norm.to_dict())
        np.testing.assert_array_equal(restored.maxs, norm.maxs)


class TestMasks:
    """Test observation mask sampling"""

    @pytest.mark.parametrize(
        "fraction, total, expected",
        [(0.0, 100, 0), (1.0, 100, 100), (0.02, 256, 5), (0.01, 256, 3), (0.5, 5, 3), (0.1, 5, 1)],
    )
    def test_observed_count_rounds_half_up(self, fraction, total, expected):
        """Test round(f * total) with halves going up"""
        assert observed_count(fraction, total) == expected

    def test_fraction_out_of_range(self):
        """Test fractions outside [0, 1] are rejected"""
        with pytest.raises(ValueError):
            observed_count(1.5, 10)

    def test_pixel_mask(self):
        """Test sorted unique pixel indices of the expected size"""
        mask = random_mask(16, 16, 0.1, seed=0)
        assert mask.size == 26
        assert np.all(np.diff(mask) > 0)
        assert mask.max() < 256

    def test_entry_mask(self):
        """Test entry masks index the main block"""
        mask = random_entry_mask(4, 4, 2, 0.25, seed=1)
        assert mask.size == 8
        assert mask.max() < 32

    def test_full_mask(self):
        """Test fraction 1 observes every pixel"""
        np.testing.assert_array_equal(random_mask(3, 3, 1.0, seed=2), np.arange(9))
