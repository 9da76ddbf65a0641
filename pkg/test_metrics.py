"""
Tests for disorientation, relative errors and ensemble statistics
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exceptions import DimensionMismatchError, MetricError
from metrics import (
    SymmetryGroup,
    circular_std,
    disorientation,
    disorientation_map,
    ensemble_error_stats,
    mean_field_disorientation,
    relative_l2,
)

angles = st.floats(min_value=-20.0, max_value=20.0, allow_nan=False, allow_infinity=False)
orders = st.integers(min_value=1, max_value=6)


class TestDisorientation:
    """Test the symmetry-aware angular distance"""

    def test_known_values(self):
        """Test a few hand-computed distances with the trivial group"""
        group = SymmetryGroup(order=1)
        assert disorientation(0.0, np.pi / 2, group) == pytest.approx(90.0)
        assert disorientation(0.1, 2.0 * np.pi - 0.1, group) == pytest.approx(np.degrees(0.2))
        assert disorientation(0.0, np.pi, group) == pytest.approx(180.0)

    def test_twofold_symmetry_identifies_antipodes(self):
        """Test theta and theta + pi coincide under m = 2"""
        assert disorientation(0.3, 0.3 + np.pi, SymmetryGroup(order=2)) == pytest.approx(0.0, abs=1e-9)

    @given(angles, angles, orders)
    @settings(max_examples=200, deadline=None)
    def test_range_and_symmetry(self, a, b, m):
        """Test d(a, b) = d(b, a) and 0 <= d <= 180 / m"""
        group = SymmetryGroup(order=m)
        d = disorientation(a, b, group)
        assert 0.0 <= d <= group.max_degrees + 1e-9
        assert d == pytest.approx(disorientation(b, a, group), abs=1e-7)

    @given(angles, orders)
    @settings(max_examples=100, deadline=None)
    def test_self_distance_zero(self, a, m):
        """Test d(a, a) = 0"""
        assert disorientation(a, a, SymmetryGroup(order=m)) == 0.0

    @given(angles, angles, st.integers(min_value=-3, max_value=3), orders)
    @settings(max_examples=200, deadline=None)
    def test_invariant_under_group(self, a, b, k, m):
        """Test rotating one argument by a group element changes nothing"""
        group = SymmetryGroup(order=m)
        shifted = disorientation(a + k * group.period, b, group)
        assert shifted == pytest.approx(disorientation(a, b, group), abs=1e-6)

    def test_map_and_mean(self):
        """Test pixelwise map and its mean"""
        group = SymmetryGroup()
        truth = np.zeros((2, 2))
        estimate = np.array([[0.0, np.pi / 2], [np.pi, -np.pi / 2]])
        np.testing.assert_allclose(disorientation_map(estimate, truth, group), [[0.0, 90.0], [180.0, 90.0]])
        assert mean_field_disorientation(estimate, truth, group) == pytest.approx(90.0)

    def test_map_shape_mismatch(self):
        """Test grids must share a shape"""
        with pytest.raises(DimensionMismatchError):
            disorientation_map(np.zeros((2, 2)), np.zeros((2, 3)), SymmetryGroup())


class TestRelativeL2:
    """Test relative errors"""

    def test_value(self):
        """Test ||a - b|| / ||b||"""
        assert relative_l2(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
        assert relative_l2(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0

    def test_zero_reference(self):
        """Test a zero reference is rejected"""
        with pytest.raises(MetricError):
            relative_l2(np.ones(3), np.zeros(3))

    def test_shape_mismatch(self):
        """Test shapes must agree"""
        with pytest.raises(DimensionMismatchError):
            relative_l2(np.ones(3), np.ones(4))


class TestEnsembleStats:
    """Test error spread over posterior samples"""

    def test_identical_samples(self):
        """Test identical samples have no spread"""
        truth = np.zeros((3, 3))
        sample = np.full((3, 3), 0.2)
        stats = ensemble_error_stats([sample, sample, sample], truth, SymmetryGroup())
        assert stats.mean_error == pytest.approx(np.degrees(0.2))
        assert stats.std_error == 0.0
        np.testing.assert_allclose(stats.pixel_std, 0.0, atol=1e-5)

    def test_spread(self):
        """Test per-sample errors and their ddof=1 std"""
        truth = np.zeros((2, 2))
        samples = [np.full((2, 2), 0.1), np.full((2, 2), 0.3)]
        stats = ensemble_error_stats(samples, truth, SymmetryGroup())
        np.testing.assert_allclose(stats.sample_errors, np.degrees([0.1, 0.3]))
        assert stats.std_error == pytest.approx(np.std(np.degrees([0.1, 0.3]), ddof=1))
        assert np.all(stats.pixel_std > 0.0)

    def test_needs_two_samples(self):
        """Test a single sample has no spread to report"""
        with pytest.raises(MetricError):
            ensemble_error_stats([np.zeros((2, 2))], np.zeros((2, 2)), SymmetryGroup())

    def test_circular_std_wraps(self):
        """Test angles straddling zero have a small circular spread"""
        spread = circular_std(np.array([0.05, 2.0 * np.pi - 0.05]), SymmetryGroup())
        assert float(spread) == pytest.approx(np.degrees(0.05), rel=0.01)

    def test_circular_std_respects_symmetry(self):
        """Test antipodal angles have no spread under m = 2"""
        spread = circular_std(np.array([0.4, 0.4 + np.pi]), SymmetryGroup(order=2))
        assert float(spread) == pytest.approx(0.0, abs=1e-5)
