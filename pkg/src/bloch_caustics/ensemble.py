"""Imperfect ensembles, width diagnostics and the Liouville patch-area check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LinearRing

from .canonical import POLE_TOL, PoleError, canonical_to_cartesian
from .pulse_dsl import PulseSequence
from .rotating_frame import (
    DEFAULT_STEPS,
    NORTH_POLE,
    EnsembleMember,
    propagator_at,
    sequence_omegas,
    states_at,
    time_grid,
    trajectory,
)

__all__ = [
    "FIELD",
    "OFFSET",
    "ENSEMBLE_DEFAULTS",
    "Ensemble",
    "WidthRate",
    "WidthSeries",
    "SegmentWidth",
    "SelfIntersectionError",
    "make_ensemble",
    "ensemble_states_at",
    "width",
    "width_rate",
    "width_series",
    "segment_width_report",
    "rectangle_patch",
    "default_patch",
    "patch_area",
    "shoelace_area",
]

FIELD = "field_inhomogeneity"
OFFSET = "resonance_offset"
ENSEMBLE_DEFAULTS = {FIELD: (0.8, 0.9, 101), OFFSET: (0.4, 0.6, 201)}
WIDTH_THRESHOLD = 0.05


class SelfIntersectionError(ValueError):
    pass


@dataclass(frozen=True)
class Ensemble:
    """Members on a uniform grid of the imperfection parameter ``w``.

    For field inhomogeneity ``w`` is the field relative to the nominal field;
    for resonance offset it is the detuning.
    """

    kind: str
    members: tuple
    r0: np.ndarray = field(default_factory=lambda: NORTH_POLE.copy(), repr=False)
    nominal_field: float = 1.0

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def parameters(self) -> np.ndarray:
        if self.kind == FIELD:
            return np.array([m.field_scale / self.nominal_field for m in self.members])
        return np.array([m.offset for m in self.members])


def make_ensemble(kind: str, w_range=None, count: int | None = None, nominal_field: float = 1.0, r0=None) -> Ensemble:
    """Uniform ensemble including both endpoints of ``w_range``.

    >>> e = make_ensemble("field_inhomogeneity")
    >>> len(e), e.members[1].field_scale
    (101, 0.801)
    """
    if kind not in ENSEMBLE_DEFAULTS:
        raise ValueError(f"unknown ensemble kind {kind!r}; expected one of {sorted(ENSEMBLE_DEFAULTS)}")
    lo_d, hi_d, n_d = ENSEMBLE_DEFAULTS[kind]
    lo, hi = (lo_d, hi_d) if w_range is None else (float(w_range[0]), float(w_range[1]))
    n = n_d if count is None else int(count)
    if n < 2:
        raise ValueError(f"an ensemble needs at least 2 members, got {n}")
    if not lo < hi:
        raise ValueError(f"invalid parameter range [{lo}, {hi}]")
    if not nominal_field > 0:
        raise ValueError("nominal field must be positive")
    grid = np.linspace(lo, hi, n)
    # snap to the decimal grid so that e.g. 0.8 + 0.001*j prints as expected
    grid = [float(f"{g:.12g}") for g in grid]
    if kind == FIELD:
        if lo <= 0:
            raise ValueError("field scales must be positive")
        members = tuple(EnsembleMember(field_scale=g * nominal_field, offset=0.0, index=j) for j, g in enumerate(grid))
    else:
        members = tuple(EnsembleMember(field_scale=nominal_field, offset=g, index=j) for j, g in enumerate(grid))
    start = NORTH_POLE.copy() if r0 is None else np.asarray(r0, dtype=float)
    return Ensemble(kind=kind, members=members, r0=start, nominal_field=nominal_field)


def ensemble_states_at(ensemble: Ensemble, sequence: PulseSequence, times) -> np.ndarray:
    """Exact states of every member, shape ``(len(times), n_members, 3)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.stack([states_at(ensemble.r0, sequence, m, times) for m in ensemble.members], axis=1)


def width(states) -> float:
    """Population RMS distance of the members from their mean."""
    states = np.asarray(states, dtype=float).reshape(-1, 3)
    dev = states - states.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(dev * dev, axis=1))))


@dataclass(frozen=True)
class WidthRate:
    """Time derivative of the squared width and its four constituent terms.

    ``s1`` holds ``r_j . dr_j/dt`` per member; ``s2_sum`` and ``s3_sum`` are
    the member sums of ``r_j . d(mean)/dt`` and ``mean . dr_j/dt``; ``s4`` is
    ``mean . d(mean)/dt``. With ``s1`` zero the rate reduces to ``-2*s4``.
    ``rate_alt`` is the alternative ``2*s4/N`` normalisation, kept for
    comparison only.
    """

    dsigma2_dt: float
    s1: np.ndarray
    s2_sum: float
    s3_sum: float
    s4: float
    rate_alt: float

    @property
    def s23_sum(self) -> float:
        return self.s2_sum + self.s3_sum


def width_rate(states, omegas) -> WidthRate:
    states = np.asarray(states, dtype=float).reshape(-1, 3)
    omegas = np.asarray(omegas, dtype=float).reshape(-1, 3)
    n = states.shape[0]
    rdot = np.cross(omegas, states)
    mean = states.mean(axis=0)
    mean_dot = rdot.mean(axis=0)
    s1 = np.einsum("ij,ij->i", states, rdot)
    s2 = float(np.sum(states @ mean_dot))
    s3 = float(np.sum(rdot @ mean))
    s4 = float(mean @ mean_dot)
    full = 2.0 / n * (float(np.sum(s1)) - s2 - s3) + 2.0 * s4
    return WidthRate(dsigma2_dt=full, s1=s1, s2_sum=s2, s3_sum=s3, s4=s4, rate_alt=2.0 * s4 / n)


@dataclass
class WidthSeries:
    """Width of an ensemble on the trajectory grid.

    ``dsigma2_dt`` is the analytic rate (right derivative at boundary
    samples); ``dsigma2_dt_numeric`` is the central difference of ``sigma**2``
    and is NaN at the ends and at segment boundaries.
    """

    times: np.ndarray
    sigma: np.ndarray
    dsigma2_dt: np.ndarray
    dsigma2_dt_numeric: np.ndarray
    segment_index: np.ndarray = field(repr=False)
    boundary_mask: np.ndarray = field(repr=False)
    s1_max: np.ndarray = field(repr=False)
    s2_sum: np.ndarray = field(repr=False)
    s3_sum: np.ndarray = field(repr=False)
    s4: np.ndarray = field(repr=False)
    rate_alt: np.ndarray = field(repr=False)

    @property
    def s23_sum(self) -> np.ndarray:
        return self.s2_sum + self.s3_sum

    @property
    def interior(self) -> np.ndarray:
        """Samples where both rates are defined."""
        return np.isfinite(self.dsigma2_dt_numeric)


def _member_rates(r, omegas_by_seg, seg):
    return np.cross(omegas_by_seg[seg], r)


def width_series(ensemble: Ensemble, sequence: PulseSequence, n_steps: int = DEFAULT_STEPS) -> WidthSeries:
    """Width, analytic rate and term diagnostics along the whole sequence.

    Trajectories are regenerated member by member in two passes (means
    first, deviations second), so memory stays at a few time series.
    """
    grid = time_grid(sequence.boundaries, n_steps)
    seg = grid.segment_index
    n_t = grid.times.size
    n = len(ensemble)
    sum_r = np.zeros((n_t, 3))
    sum_rdot = np.zeros((n_t, 3))
    for m in ensemble.members:
        r = trajectory(ensemble.r0, sequence, m, n_steps).states
        sum_r += r
        sum_rdot += _member_rates(r, sequence_omegas(sequence, m), seg)
    mean = sum_r / n
    mean_dot = sum_rdot / n
    sq = np.zeros(n_t)
    s1_sum = np.zeros(n_t)
    s1_max = np.zeros(n_t)
    s2 = np.zeros(n_t)
    s3 = np.zeros(n_t)
    for m in ensemble.members:
        r = trajectory(ensemble.r0, sequence, m, n_steps).states
        rdot = _member_rates(r, sequence_omegas(sequence, m), seg)
        dev = r - mean
        sq += np.einsum("ij,ij->i", dev, dev)
        s1 = np.einsum("ij,ij->i", r, rdot)
        s1_sum += s1
        np.maximum(s1_max, np.abs(s1), out=s1_max)
        s2 += np.einsum("ij,ij->i", r, mean_dot)
        s3 += np.einsum("ij,ij->i", mean, rdot)
    sigma2 = sq / n
    s4 = np.einsum("ij,ij->i", mean, mean_dot)
    analytic = 2.0 / n * (s1_sum - s2 - s3) + 2.0 * s4
    numeric = np.full(n_t, np.nan)
    t = grid.times
    numeric[1:-1] = (sigma2[2:] - sigma2[:-2]) / (t[2:] - t[:-2])
    numeric[grid.boundary_mask] = np.nan
    return WidthSeries(
        times=t,
        sigma=np.sqrt(sigma2),
        dsigma2_dt=analytic,
        dsigma2_dt_numeric=numeric,
        segment_index=seg,
        boundary_mask=grid.boundary_mask,
        s1_max=s1_max,
        s2_sum=s2,
        s3_sum=s3,
        s4=s4,
        rate_alt=2.0 * s4 / n,
    )


@dataclass(frozen=True)
class SegmentWidth:
    index: int
    t_start: float
    t_end: float
    sigma_min: float
    sigma_max: float
    variation: float
    conserved: bool


def segment_width_report(
    ensemble: Ensemble,
    sequence: PulseSequence,
    threshold: float = WIDTH_THRESHOLD,
    n_steps: int = DEFAULT_STEPS,
    series: WidthSeries | None = None,
) -> list[SegmentWidth]:
    """Relative width variation ``(max - min) / max`` over each closed segment."""
    if series is None:
        series = width_series(ensemble, sequence, n_steps)
    bounds = sequence.boundaries
    out = []
    for k in range(len(bounds) - 1):
        sel = (series.times >= bounds[k]) & (series.times <= bounds[k + 1])
        s = series.sigma[sel]
        hi, lo = float(s.max()), float(s.min())
        var = (hi - lo) / hi if hi > 0 else 0.0
        out.append(SegmentWidth(k, float(bounds[k]), float(bounds[k + 1]), lo, hi, var, var <= threshold))
    return out


def rectangle_patch(phi_range=(0.0, math.pi), eta_range=(0.25, 0.75), n_points: int = 400):
    """Counter-clockwise rectangle boundary in (phi, eta) with exact corners.

    Points are spread along the perimeter in proportion to edge length.
    Returns ``(phi, eta)`` arrays without repeating the first point.
    """
    (p0, p1), (e0, e1) = phi_range, eta_range
    if not (p1 > p0 and e1 > e0):
        raise ValueError("empty rectangle")
    if n_points < 4:
        raise ValueError("need at least 4 boundary points")
    lengths = np.array([p1 - p0, e1 - e0, p1 - p0, e1 - e0])
    counts = np.maximum(1, np.floor(n_points * lengths / lengths.sum()).astype(int))
    for k in np.argsort(-(n_points * lengths / lengths.sum() - counts))[: n_points - counts.sum()]:
        counts[k] += 1
    corners = [(p0, e0), (p1, e0), (p1, e1), (p0, e1)]
    phis, etas = [], []
    for k in range(4):
        (a_phi, a_eta), (b_phi, b_eta) = corners[k], corners[(k + 1) % 4]
        s = np.arange(counts[k]) / counts[k]
        phis.append(a_phi + (b_phi - a_phi) * s)
        etas.append(a_eta + (b_eta - a_eta) * s)
    return np.concatenate(phis), np.concatenate(etas)


def default_patch(n_points: int = 400):
    """The phi in [0, pi], eta in [0.25, 0.75] rectangle, area pi/2."""
    return rectangle_patch((0.0, math.pi), (0.25, 0.75), n_points)


def shoelace_area(phi, eta) -> float:
    """Signed area of a closed polygon (positive counter-clockwise)."""
    phi = np.asarray(phi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return 0.5 * float(np.sum(phi * np.roll(eta, -1) - np.roll(phi, -1) * eta))


def patch_area(phi0, eta0, sequence: PulseSequence, member: EnsembleMember, times, pole_tol: float = POLE_TOL) -> np.ndarray:
    """Area ``|closed integral of eta dphi|`` of an evolving patch at each time.

    Every boundary point is moved with the exact propagator. The azimuth is
    unwrapped along the boundary; a closed boundary whose azimuth winds by a
    nonzero multiple of 2pi encloses a pole and is rejected, as is a
    boundary that self-intersects in the (phi, eta) plane.
    """
    pts = canonical_to_cartesian(phi0, eta0)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    areas = np.empty(times.size)
    for i, t in enumerate(times):
        r = pts @ propagator_at(sequence, member, t).T
        eta = r[:, 2]
        if np.any(np.abs(eta) >= 1.0 - pole_tol):
            raise PoleError(f"patch boundary reaches a pole at t={t:.6g}")
        phi = np.unwrap(np.arctan2(r[:, 1], r[:, 0]))
        closing = np.mod(phi[0] - phi[-1] + math.pi, 2 * math.pi) - math.pi
        winding = round((phi[-1] + closing - phi[0]) / (2 * math.pi))
        if winding != 0:
            raise PoleError(f"patch encloses a pole at t={t:.6g} (azimuth winding {winding})")
        if not LinearRing(np.column_stack([phi, eta])).is_simple:
            raise SelfIntersectionError(f"patch boundary self-intersects at t={t:.6g}")
        areas[i] = abs(shoelace_area(phi, eta))
    return areas
