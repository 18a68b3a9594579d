from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bloch_caustics.canonical import PoleError
from bloch_caustics.ensemble import (
    FIELD,
    OFFSET,
    Ensemble,
    SelfIntersectionError,
    default_patch,
    ensemble_states_at,
    make_ensemble,
    patch_area,
    rectangle_patch,
    segment_width_report,
    shoelace_area,
    width,
    width_rate,
    width_series,
)
from bloch_caustics.rotating_frame import EnsembleMember, segment_propagator


class TestMakeEnsemble:
    def test_field_defaults(self, field_ensemble):
        assert len(field_ensemble) == 101
        np.testing.assert_allclose(np.diff(field_ensemble.parameters), 0.001, atol=1e-12)
        assert field_ensemble.members[0].field_scale == 0.8
        assert field_ensemble.members[-1].field_scale == 0.9
        assert all(m.offset == 0 for m in field_ensemble)

    def test_offset_defaults(self, offset_ensemble):
        assert len(offset_ensemble) == 201
        assert offset_ensemble.members[1].offset == 0.401
        assert type(offset_ensemble.members[1].offset) is float
        np.testing.assert_array_equal(offset_ensemble.r0, [0, 0, 1])

    def test_two_members(self):
        e = make_ensemble(OFFSET, (0.0, 1.0), 2)
        assert [m.offset for m in e] == [0.0, 1.0]

    def test_nominal_field(self):
        e = make_ensemble(FIELD, nominal_field=2.0)
        assert e.members[0].field_scale == pytest.approx(1.6)
        assert e.parameters[0] == pytest.approx(0.8)

    @pytest.mark.parametrize("kwargs", [dict(count=1), dict(w_range=(0.9, 0.8)), dict(w_range=(0.0, 1.0))])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            make_ensemble(FIELD, **kwargs)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_ensemble("thermal")


class TestWidth:
    def test_identical(self):
        assert width(np.tile([0.0, 0.6, 0.8], (5, 1))) == 0

    def test_antipodes(self):
        assert width([[0, 0, 1], [0, 0, -1]]) == 1

    def test_starts_at_zero(self, levitt, field_ensemble):
        assert width(ensemble_states_at(field_ensemble, levitt, [0.0])[0]) == 0.0

    def test_refocusing(self, levitt, field_ensemble):
        T = levitt.total_duration
        s = ensemble_states_at(field_ensemble, levitt, [T / 4, T])
        assert width(s[1]) < width(s[0])


def _random_states(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestWidthRate:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**31))
    def test_s1_vanishes(self, n, seed):
        rng = np.random.default_rng(seed)
        r = width_rate(_random_states(rng, n), rng.normal(size=(n, 3)))
        assert np.abs(r.s1).max() <= 1e-14

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**31))
    def test_cross_terms(self, n, seed):
        # the two cross sums agree and each equals N * s4, so the rate is -2 s4
        rng = np.random.default_rng(seed)
        r = width_rate(_random_states(rng, n), rng.normal(size=(n, 3)))
        assert r.s2_sum == pytest.approx(r.s3_sum, abs=1e-12)
        assert r.s2_sum == pytest.approx(n * r.s4, abs=1e-12)
        assert r.dsigma2_dt == pytest.approx(-2 * r.s4, abs=1e-12)

    def test_matches_finite_difference(self, rng):
        n, h = 7, 1e-5
        r0 = _random_states(rng, n)
        w = rng.normal(size=(n, 3))
        def sig2(t):
            return width(np.array([segment_propagator(w[j], t) @ r0[j] if t >= 0 else segment_propagator(w[j], -t).T @ r0[j]
                                   for j in range(n)])) ** 2

        fd = (sig2(h) - sig2(-h)) / (2 * h)
        assert width_rate(r0, w).dsigma2_dt == pytest.approx(fd, abs=1e-8)


@pytest.fixture(scope="module")
def series(levitt):
    return width_series(make_ensemble(OFFSET, count=21), levitt, n_steps=20_000)


class TestWidthSeries:
    def test_rate_identity(self, series):
        err = np.abs(series.dsigma2_dt - series.dsigma2_dt_numeric)[series.interior]
        assert err.max() <= 1e-5

    def test_numeric_excludes_boundaries(self, series):
        assert np.all(np.isnan(series.dsigma2_dt_numeric[series.boundary_mask]))
        assert not series.interior[series.boundary_mask].any()

    def test_s1(self, series):
        assert series.s1_max.max() <= 1e-13

    def test_sigma_start(self, series):
        assert series.sigma[0] == 0.0

    def test_segment_report(self, levitt, series):
        rep = segment_width_report(None, levitt, series=series)
        assert [s.index for s in rep] == [0, 1, 2]
        assert all(0 <= s.variation <= 1 for s in rep)
        assert rep[0].variation == 1.0 and not rep[0].conserved

    def test_single_member(self, levitt):
        e = Ensemble(FIELD, (EnsembleMember(0.85),))
        rep = segment_width_report(e, levitt, n_steps=3000)
        assert all(s.conserved and s.sigma_max == 0 for s in rep)


class TestPatch:
    def test_rectangle(self):
        phi, eta = default_patch(400)
        assert phi.size == 400
        assert shoelace_area(phi, eta) == pytest.approx(math.pi / 2, abs=1e-14)
        for corner in [(0.0, 0.25), (math.pi, 0.25), (math.pi, 0.75), (0.0, 0.75)]:
            assert np.any((phi == corner[0]) & (eta == corner[1]))

    def test_initial_area_exact(self, levitt, nominal):
        phi, eta = default_patch()
        a = patch_area(phi, eta, levitt, nominal, [0.0])
        assert a[0] == pytest.approx(math.pi / 2, abs=1e-14)

    def test_free_precession(self, levitt):
        phi, eta = rectangle_patch((0.2, 1.0), (-0.3, 0.4), 100)
        m = EnsembleMember(field_scale=0.0, offset=1.3)
        a = patch_area(phi, eta, levitt, m, np.linspace(0, levitt.total_duration, 9))
        np.testing.assert_allclose(a, a[0], rtol=1e-13)

    def test_levitt_conserved(self, levitt, nominal):
        phi, eta = default_patch()
        a = patch_area(phi, eta, levitt, nominal, np.linspace(0, levitt.total_duration, 41))
        assert np.abs(a - math.pi / 2).max() / (math.pi / 2) <= 0.01

    def test_encloses_pole(self, levitt, nominal):
        phi = np.linspace(0, 2 * math.pi, 50, endpoint=False)
        with pytest.raises(PoleError):
            patch_area(phi, np.full(50, 0.9), levitt, nominal, [0.0])

    def test_self_intersection(self, levitt, nominal):
        phi = np.array([0.0, 1.0, 0.0, 1.0])
        eta = np.array([0.0, 0.5, 0.5, 0.0])
        with pytest.raises(SelfIntersectionError):
            patch_area(phi, eta, levitt, nominal, [0.0])

    def test_pole_crossing(self, levitt, nominal):
        # the first x pulse sweeps this patch across the north pole
        phi, eta = rectangle_patch((1.5 * math.pi - 0.1, 1.5 * math.pi + 0.1), (0.9, 0.95), 80)
        with pytest.raises(PoleError):
            patch_area(phi, eta, levitt, nominal, np.linspace(0, levitt.total_duration / 4, 200))
