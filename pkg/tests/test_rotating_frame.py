from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bloch_caustics.pulse_dsl import PulseSegment, PulseSequence, parse_sequence
from bloch_caustics.rotating_frame import (
    NORTH_POLE,
    EnsembleMember,
    NonUnitStateError,
    build_omega,
    propagate_sequence,
    propagator_at,
    propagator_between,
    segment_propagator,
    skew,
    states_at,
    time_grid,
    trajectory,
)

X_SEG = PulseSegment(math.pi / 2, 0.0)
Y_SEG = PulseSegment(math.pi, math.pi / 2)

vec3 = st.lists(st.floats(min_value=-3, max_value=3, allow_nan=False), min_size=3, max_size=3).map(np.array)


class TestBuildOmega:
    def test_x_segment(self):
        assert tuple(build_omega(EnsembleMember(), X_SEG)) == (-1.0, 0.0, 0.0)

    def test_y_segment(self):
        assert tuple(build_omega(EnsembleMember(), Y_SEG)) == (0.0, -1.0, 0.0)

    def test_rabi(self):
        m = EnsembleMember(1.0, 0.5)
        assert np.linalg.norm(build_omega(m, Y_SEG)) == pytest.approx(math.sqrt(1.25))
        assert m.rabi_frequency == pytest.approx(math.sqrt(1.25))

    def test_polar(self):
        assert EnsembleMember(1.0, 1.0).axis_polar == pytest.approx(math.pi / 4)

    def test_field_scale(self):
        np.testing.assert_allclose(build_omega(EnsembleMember(0.8, 0.1), X_SEG), [-0.8, 0, 0.1])


class TestSkew:
    def test_z(self):
        np.testing.assert_array_equal(skew([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])

    def test_minus_x(self):
        np.testing.assert_array_equal(skew([-1, 0, 0]), [[0, 0, 0], [0, 0, 1], [0, -1, 0]])

    def test_zero(self):
        assert not skew([0, 0, 0]).any()

    @settings(max_examples=50)
    @given(vec3, vec3)
    def test_cross_product(self, w, v):
        M = skew(w)
        np.testing.assert_allclose(M @ v, np.cross(w, v), atol=1e-12)
        np.testing.assert_array_equal(M, -M.T)


class TestSegmentPropagator:
    def test_quarter_turn(self):
        P = segment_propagator([-1, 0, 0], math.pi / 2)
        np.testing.assert_allclose(P @ NORTH_POLE, [0, 1, 0], atol=1e-15)

    def test_zero_duration(self):
        np.testing.assert_array_equal(segment_propagator([0.3, -0.2, 1.1], 0.0), np.eye(3))

    def test_full_revolution(self):
        np.testing.assert_allclose(segment_propagator([0, 0, 1], 2 * math.pi), np.eye(3), atol=1e-12)

    def test_zero_generator(self):
        np.testing.assert_array_equal(segment_propagator([0, 0, 0], 5.0), np.eye(3))

    @settings(max_examples=100)
    @given(vec3, st.floats(min_value=0, max_value=20))
    def test_orthogonal(self, w, tau):
        P = segment_propagator(w, tau)
        assert np.abs(P.T @ P - np.eye(3)).max() <= 1e-12
        assert abs(np.linalg.det(P) - 1) <= 1e-12

    @settings(max_examples=30)
    @given(vec3, st.floats(min_value=0, max_value=3))
    def test_matches_series(self, w, tau):
        # truncated Taylor series of exp(tau * skew(w)) as an independent oracle
        A = tau * skew(w)
        term, total = np.eye(3), np.eye(3)
        for k in range(1, 60):
            term = term @ A / k
            total = total + term
        np.testing.assert_allclose(segment_propagator(w, tau), total, atol=1e-10)


class TestPropagateSequence:
    def test_levitt_nominal(self, levitt):
        r = propagate_sequence(NORTH_POLE, levitt, EnsembleMember())
        assert np.linalg.norm(r - [0, 0, -1]) <= 1e-12

    def test_field_member_near_antipode(self, levitt):
        r = propagate_sequence(NORTH_POLE, levitt, EnsembleMember(0.8))
        assert r[2] < -0.95
        assert np.hypot(r[0], r[1]) > 1e-3

    def test_empty(self):
        r = np.array([0.6, 0.0, 0.8])
        np.testing.assert_array_equal(propagate_sequence(r, PulseSequence(()), EnsembleMember()), r)

    def test_non_unit(self, levitt):
        with pytest.raises(NonUnitStateError):
            propagate_sequence([0, 0, 2.0], levitt, EnsembleMember())

    def test_order(self):
        # y then x differs from x then y
        xy = propagate_sequence(NORTH_POLE, parse_sequence("90(x)90(y)"), EnsembleMember())
        np.testing.assert_allclose(xy, [0, 1, 0], atol=1e-15)
        yx = propagate_sequence(NORTH_POLE, parse_sequence("90(y)90(x)"), EnsembleMember())
        np.testing.assert_allclose(yx, [-1, 0, 0], atol=1e-15)

    def test_backward_propagator(self, levitt):
        m = EnsembleMember(0.85, 0.1)
        P = propagator_between(levitt, m, 1.0, 5.0)
        Q = propagator_between(levitt, m, 5.0, 1.0)
        np.testing.assert_allclose(P @ Q, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(propagator_between(levitt, m, 0.0, 5.0), propagator_at(levitt, m, 5.0), atol=1e-15)


class TestTrajectory:
    def test_first_segment_midpoint(self, levitt):
        T = levitt.total_duration
        r = states_at(NORTH_POLE, levitt, EnsembleMember(), [T / 8])[0]
        np.testing.assert_allclose(r, [0, math.sin(math.pi / 4), math.cos(math.pi / 4)], atol=1e-15)

    def test_first_segment_form(self, levitt):
        t = np.linspace(0, math.pi / 2, 11)
        r = states_at(NORTH_POLE, levitt, EnsembleMember(), t)
        np.testing.assert_allclose(r, np.column_stack([0 * t, np.sin(t), np.cos(t)]), atol=1e-15)

    def test_start_exact(self, levitt):
        tr = trajectory(NORTH_POLE, levitt, EnsembleMember(0.83), 1000)
        np.testing.assert_array_equal(tr.states[0], NORTH_POLE)

    def test_boundary_matches_composed(self, levitt):
        m = EnsembleMember(0.87, 0.0)
        tr = trajectory(NORTH_POLE, levitt, m, 1000)
        k = np.flatnonzero(np.isclose(tr.times, 0.75 * levitt.total_duration))[0]
        two = propagate_sequence(NORTH_POLE, PulseSequence(levitt.segments[:2]), m)
        np.testing.assert_allclose(tr.states[k], two, atol=1e-15)

    def test_composition(self, levitt):
        m = EnsembleMember(1.0, 0.47)
        tr = trajectory(NORTH_POLE, levitt, m)
        assert np.abs(tr.states[-1] - propagate_sequence(NORTH_POLE, levitt, m)).max() <= 1e-12

    def test_norm(self, levitt):
        tr = trajectory(NORTH_POLE, levitt, EnsembleMember(0.8, 0.3))
        assert np.abs(tr.norms() - 1).max() <= 1e-9

    def test_too_few_steps(self, levitt):
        with pytest.raises(ValueError):
            trajectory(NORTH_POLE, levitt, EnsembleMember(), 2)

    def test_flip_angle_law(self, levitt):
        m = EnsembleMember(0.8)
        P = propagator_at(levitt, m, levitt.boundaries[1])
        beta = math.acos((np.trace(P) - 1) / 2)
        assert beta == pytest.approx(0.8 * math.pi / 2, abs=1e-12)


class TestTimeGrid:
    def test_boundaries_inserted(self):
        b = np.array([0.0, 0.3, 1.0])
        g = time_grid(b, 7)
        assert 0.3 in g.times
        assert g.times[0] == 0.0 and g.times[-1] == 1.0
        assert np.all(np.diff(g.times) > 0)

    def test_segment_membership(self, levitt):
        g = time_grid(levitt.boundaries, 100)
        k = np.flatnonzero(g.boundary_mask)
        # a boundary sample belongs to the segment starting there, the last to the last segment
        np.testing.assert_array_equal(g.segment_index[k], [0, 1, 2, 2])
        assert g.segment_index[-1] == 2
