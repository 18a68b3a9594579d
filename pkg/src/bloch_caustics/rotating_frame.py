"""Exact rotating-frame propagation of Bloch vectors.

Each segment of a composite pulse is a fixed-axis rotation generated by the
3-vector ``omega`` through ``r' = omega x r``. For a member driven with field
``field_scale`` and detuning ``offset``, a segment with axis phase ``phi_k``
has::

    omega = (-field_scale * s * cos(phi_k), -field_scale * s * sin(phi_k), offset)

(with ``s`` the segment amplitude scale), so a field along +x gives
``omega_x = -field_scale`` and the north pole turns toward +y.

All propagation here uses closed-form Rodrigues rotations evaluated from the
start of the current segment, so nothing accumulates along a trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pulse_dsl import PulseSegment, PulseSequence

__all__ = [
    "EnsembleMember",
    "TimeGrid",
    "Trajectory",
    "NonUnitStateError",
    "NORTH_POLE",
    "DEFAULT_STEPS",
    "build_omega",
    "sequence_omegas",
    "skew",
    "segment_propagator",
    "rotate",
    "propagate_sequence",
    "propagate_between",
    "propagator_at",
    "states_at",
    "time_grid",
    "trajectory",
]

NORTH_POLE = np.array([0.0, 0.0, 1.0])
DEFAULT_STEPS = 100_000
UNIT_TOL = 1e-9


class NonUnitStateError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleMember:
    """One imperfect realisation of the drive.

    ``field_scale`` is the field magnitude felt by this member and ``offset``
    its resonance offset, both angular frequencies.
    """

    field_scale: float = 1.0
    offset: float = 0.0
    index: int = 0

    @property
    def rabi_frequency(self) -> float:
        return math.hypot(self.field_scale, self.offset)

    @property
    def axis_polar(self) -> float:
        """Polar angle of the effective rotation axis, ``atan2(field, offset)``."""
        return math.atan2(self.field_scale, self.offset)


def build_omega(member: EnsembleMember, segment: PulseSegment) -> np.ndarray:
    """Rotating-frame generator vector for one member during one segment."""
    amp = member.field_scale * segment.amplitude_scale
    n = segment.axis
    return np.array([-amp * n[0], -amp * n[1], member.offset - amp * n[2]])


def sequence_omegas(sequence: PulseSequence, member: EnsembleMember) -> np.ndarray:
    """Generators for every segment, shape ``(n_segments, 3)``."""
    return np.array([build_omega(member, s) for s in sequence.segments]).reshape(-1, 3)


def skew(omega) -> np.ndarray:
    """Cross-product matrix: ``skew(w) @ v == np.cross(w, v)``.

    Works on stacks, ``(..., 3) -> (..., 3, 3)``.
    """
    w = np.asarray(omega, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def segment_propagator(omega, duration: float) -> np.ndarray:
    """``expm(duration * skew(omega))`` in closed form (Rodrigues)."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    w = np.asarray(omega, dtype=float)
    rate = float(np.linalg.norm(w))
    if rate == 0.0 or duration == 0.0:
        return np.eye(3)
    k = w / rate
    K = skew(k)
    angle = rate * duration
    # k k^T instead of I + K @ K keeps the result orthogonal to roundoff
    return math.cos(angle) * np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * np.outer(k, k)


def rotate(omega, taus, r) -> np.ndarray:
    """Rotate ``r`` (shape ``(3,)``) by ``expm(tau * skew(omega))`` for every ``tau``.

    Returns shape ``(len(taus), 3)``.
    """
    w = np.asarray(omega, dtype=float)
    r = np.asarray(r, dtype=float)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    rate = float(np.linalg.norm(w))
    if rate == 0.0:
        return np.broadcast_to(r, (taus.size, 3)).copy()
    k = w / rate
    angle = (rate * taus)[:, None]
    return r * np.cos(angle) + np.cross(k, r) * np.sin(angle) + k * (k @ r) * (1.0 - np.cos(angle))


def _check_unit(r, tol=UNIT_TOL):
    norm = float(np.linalg.norm(r))
    if abs(norm - 1.0) > tol:
        raise NonUnitStateError(f"Bloch vector norm {norm!r} differs from 1 by more than {tol}")


def propagate_between(r, sequence: PulseSequence, member: EnsembleMember, t_start: float, t_end: float) -> np.ndarray:
    """Carry ``r`` from clock time ``t_start`` to ``t_end`` (forward or backward).

    The map is linear, so ``r`` need not be a unit vector.
    """
    return propagator_between(sequence, member, t_start, t_end) @ np.asarray(r, dtype=float)


def propagator_between(sequence: PulseSequence, member: EnsembleMember, t_start: float, t_end: float) -> np.ndarray:
    if t_end < t_start:
        return propagator_between(sequence, member, t_end, t_start).T
    bounds = sequence.boundaries
    P = np.eye(3)
    for k, seg in enumerate(sequence.segments):
        a, b = max(bounds[k], t_start), min(bounds[k + 1], t_end)
        if b > a:
            P = segment_propagator(build_omega(member, seg), b - a) @ P
    return P


def propagator_at(sequence: PulseSequence, member: EnsembleMember, t: float) -> np.ndarray:
    """Rotation taking the state at time 0 to the state at time ``t``."""
    return propagator_between(sequence, member, 0.0, t)


def propagate_sequence(r_i, sequence: PulseSequence, member: EnsembleMember) -> np.ndarray:
    """Apply the whole sequence to ``r_i``, first segment first."""
    r = np.asarray(r_i, dtype=float)
    _check_unit(r)
    for seg, t_k in zip(sequence.segments, sequence.clock_times):
        r = segment_propagator(build_omega(member, seg), t_k) @ r
    return r


def _segment_of(times, boundaries) -> np.ndarray:
    n_seg = len(boundaries) - 1
    idx = np.searchsorted(boundaries, times, side="right") - 1
    return np.clip(idx, 0, n_seg - 1)


def states_at(r0, sequence: PulseSequence, member: EnsembleMember, times) -> np.ndarray:
    """Exact states at arbitrary clock times (any order), shape ``(len(times), 3)``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    bounds = sequence.boundaries
    seg_idx = _segment_of(times, bounds)
    out = np.empty((times.size, 3))
    r = np.asarray(r0, dtype=float)
    for k, seg in enumerate(sequence.segments):
        omega = build_omega(member, seg)
        mask = seg_idx == k
        if np.any(mask):
            out[mask] = rotate(omega, times[mask] - bounds[k], r)
        r = segment_propagator(omega, bounds[k + 1] - bounds[k]) @ r
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform clock-time samples with every segment boundary included exactly.

    ``segment_index[i]`` is the segment that sample ``i`` belongs to; a
    boundary sample belongs to the segment that starts there (the final
    sample belongs to the last segment). ``boundary_mask`` flags the
    boundary samples, including 0 and the end.
    """

    times: np.ndarray
    segment_index: np.ndarray
    boundary_mask: np.ndarray
    boundaries: np.ndarray

    @property
    def local_times(self) -> np.ndarray:
        return self.times - self.boundaries[self.segment_index]


def time_grid(boundaries, n_steps: int = DEFAULT_STEPS) -> TimeGrid:
    boundaries = np.asarray(boundaries, dtype=float)
    n_seg = len(boundaries) - 1
    if n_steps < n_seg:
        raise ValueError(f"n_steps={n_steps} is smaller than the number of segments ({n_seg})")
    total = boundaries[-1]
    times = np.linspace(0.0, total, n_steps + 1)
    snap = 1e-9 * (total / n_steps)
    extra = []
    for b in boundaries[1:-1]:
        j = int(np.argmin(np.abs(times - b)))
        if abs(times[j] - b) <= snap:
            times[j] = b
        else:
            extra.append(b)
    if extra:
        times = np.union1d(times, extra)
    times[-1] = total
    seg = _segment_of(times, boundaries)
    bmask = np.isin(times, boundaries)
    return TimeGrid(times=times, segment_index=seg, boundary_mask=bmask, boundaries=boundaries)


@dataclass(frozen=True)
class Trajectory:
    """Time-sampled Bloch vectors.

    ``states`` has the time axis first; a batch of members carries an extra
    member axis, ``(n_samples, n_members, 3)``.
    """

    times: np.ndarray
    states: np.ndarray
    segment_index: np.ndarray
    boundary_mask: np.ndarray = field(repr=False)
    member_index: int | None = None

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=-1)


def trajectory(
    r0,
    sequence: PulseSequence,
    member: EnsembleMember,
    n_steps: int = DEFAULT_STEPS,
) -> Trajectory:
    """Exact trajectory on a uniform grid with segment boundaries inserted.

    Every sample is an exact rotation of the state at the start of its
    segment.
    """
    r0 = np.asarray(r0, dtype=float)
    _check_unit(r0)
    grid = time_grid(sequence.boundaries, n_steps)
    bounds = sequence.boundaries
    out = np.empty((grid.times.size, 3))
    r = r0
    for k, seg in enumerate(sequence.segments):
        omega = build_omega(member, seg)
        mask = grid.segment_index == k
        out[mask] = rotate(omega, grid.times[mask] - bounds[k], r)
        r = segment_propagator(omega, bounds[k + 1] - bounds[k]) @ r
    # the end sample is assigned to the last segment; other boundary samples
    # start their segment and are therefore exactly the propagated state.
    return Trajectory(
        times=grid.times,
        states=out,
        segment_index=grid.segment_index,
        boundary_mask=grid.boundary_mask,
        member_index=member.index,
    )
