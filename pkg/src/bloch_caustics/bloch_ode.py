"""Fixed-step RK4 integration of the Cartesian Bloch equations.

This is deliberately independent of the closed-form propagators in
:mod:`bloch_caustics.rotating_frame` and serves as their oracle. The time
grid is the same one the exact trajectories use, so segment boundaries are
always step endpoints and no step straddles a change of generator. States are
never renormalised; norm drift is a convergence diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .pulse_dsl import PulseSequence
from .rotating_frame import (
    DEFAULT_STEPS,
    EnsembleMember,
    Trajectory,
    sequence_omegas,
    time_grid,
)

__all__ = [
    "PiecewiseGenerator",
    "cartesian_rhs",
    "integrate_cartesian",
    "max_deviation_from_exact",
]


@dataclass(frozen=True)
class PiecewiseGenerator:
    """Piecewise-constant generator schedule.

    Parameters
    ----------
    boundaries : ndarray, shape (n_seg + 1,)
        Segment boundary times starting at 0.
    generators : ndarray, shape (n_seg, 3) or (n_seg, n_members, 3)
        Generator vector for each segment (and member).
    """

    boundaries: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        g = np.asarray(self.generators, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("need at least two boundaries")
        if b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must start at 0 and increase strictly")
        if g.shape[0] != b.size - 1 or g.shape[-1] != 3 or g.ndim not in (2, 3):
            raise ValueError(f"generators shape {g.shape} does not match {b.size - 1} segments")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "generators", g)

    @classmethod
    def from_sequence(cls, sequence: PulseSequence, members) -> "PiecewiseGenerator":
        """Schedule for one member, or for a list of members (batched)."""
        if isinstance(members, EnsembleMember):
            gens = sequence_omegas(sequence, members)
        else:
            gens = np.stack([sequence_omegas(sequence, m) for m in members], axis=1)
        return cls(sequence.boundaries, gens)

    @property
    def n_segments(self) -> int:
        return self.boundaries.size - 1

    @property
    def batched(self) -> bool:
        return self.generators.ndim == 3

    def at(self, t: float) -> np.ndarray:
        k = int(np.clip(np.searchsorted(self.boundaries, t, side="right") - 1, 0, self.n_segments - 1))
        return self.generators[k]


def cartesian_rhs(r, omega) -> np.ndarray:
    """Bloch equations, ``dr/dt = omega x r``."""
    return np.cross(np.asarray(omega, dtype=float), np.asarray(r, dtype=float))


@njit(cache=True)
def _cross(w0, w1, w2, r0, r1, r2):
    return w1 * r2 - w2 * r1, w2 * r0 - w0 * r2, w0 * r1 - w1 * r0


@njit(cache=True)
def _rk4_kernel(times, seg, gens, r0, out):
    # gens: (n_seg, n_members, 3); r0: (n_members, 3); out: (n_t, n_members, 3)
    n_t = times.shape[0]
    n_m = r0.shape[0]
    for j in range(n_m):
        x, y, z = r0[j, 0], r0[j, 1], r0[j, 2]
        out[0, j, 0] = x
        out[0, j, 1] = y
        out[0, j, 2] = z
        for i in range(n_t - 1):
            h = times[i + 1] - times[i]
            k = seg[i]
            w0, w1, w2 = gens[k, j, 0], gens[k, j, 1], gens[k, j, 2]
            a0, a1, a2 = _cross(w0, w1, w2, x, y, z)
            b0, b1, b2 = _cross(w0, w1, w2, x + 0.5 * h * a0, y + 0.5 * h * a1, z + 0.5 * h * a2)
            c0, c1, c2 = _cross(w0, w1, w2, x + 0.5 * h * b0, y + 0.5 * h * b1, z + 0.5 * h * b2)
            d0, d1, d2 = _cross(w0, w1, w2, x + h * c0, y + h * c1, z + h * c2)
            x = x + h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
            y = y + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
            z = z + h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2)
            out[i + 1, j, 0] = x
            out[i + 1, j, 1] = y
            out[i + 1, j, 2] = z


def integrate_cartesian(r0, schedule: PiecewiseGenerator, n_steps: int = DEFAULT_STEPS) -> Trajectory:
    """Classical RK4 on the shared boundary-aligned grid.

    ``r0`` may be a single vector or one vector per member when the schedule
    is batched. Batched states come back as ``(n_samples, n_members, 3)``.
    """
    grid = time_grid(schedule.boundaries, n_steps)
    gens = schedule.generators
    single = gens.ndim == 2
    if single:
        gens = gens[:, None, :]
    n_m = gens.shape[1]
    r0 = np.asarray(r0, dtype=float)
    r0 = np.broadcast_to(r0.reshape(-1, 3), (n_m, 3)) if r0.ndim == 1 or r0.shape[0] == 1 else r0
    if r0.shape != (n_m, 3):
        raise ValueError(f"initial states shape {r0.shape} does not match {n_m} members")
    out = np.empty((grid.times.size, n_m, 3))
    _rk4_kernel(grid.times, grid.segment_index.astype(np.int64), np.ascontiguousarray(gens),
                np.ascontiguousarray(r0), out)
    states = out[:, 0, :] if single else out
    return Trajectory(
        times=grid.times,
        states=states,
        segment_index=grid.segment_index,
        boundary_mask=grid.boundary_mask,
    )


def max_deviation_from_exact(
    sequence: PulseSequence,
    members,
    r0=(0.0, 0.0, 1.0),
    n_steps: int = DEFAULT_STEPS,
    chunk: int = 32,
) -> np.ndarray:
    """Max-over-time ``|r_ode - r_exact|`` for every member.

    Members are processed in chunks to bound memory at full resolution.
    """
    from .rotating_frame import trajectory

    members = list(members)
    result = np.empty(len(members))
    for start in range(0, len(members), chunk):
        block = members[start:start + chunk]
        ode = integrate_cartesian(r0, PiecewiseGenerator.from_sequence(sequence, block), n_steps)
        for j, m in enumerate(block):
            exact = trajectory(r0, sequence, m, n_steps).states
            result[start + j] = np.max(np.linalg.norm(ode.states[:, j, :] - exact, axis=1))
    return result
