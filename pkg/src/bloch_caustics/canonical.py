"""Canonical coordinates on the Bloch sphere.

The azimuth ``phi`` is the position and ``eta = z = cos(theta)`` the conjugate
momentum, with ``{phi, eta} = 1``. On the unit sphere the Zeeman energy
``H = omega . r`` becomes::

    H(phi, eta) = sqrt(1 - eta**2) * (Wx cos(phi) + Wy sin(phi)) + Wz * eta

and Hamilton's equations reproduce the Bloch equations everywhere except at
the poles, where ``phi`` is undefined. Analyses therefore take (phi, eta)
from Cartesian trajectories (integrate, then ``atan2``); direct integration of
the canonical equations is kept as a cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .bloch_ode import PiecewiseGenerator
from .rotating_frame import DEFAULT_STEPS, Trajectory, time_grid

__all__ = [
    "POLE_TOL",
    "PoleError",
    "PoleCrossingError",
    "BoundarySampleError",
    "AmbiguousUnwrapWarning",
    "MixedStateWarning",
    "CanonicalState",
    "CanonicalTrajectory",
    "BranchSelection",
    "ELResidual",
    "to_canonical",
    "from_canonical",
    "canonical_to_cartesian",
    "hamiltonian",
    "canonical_rhs",
    "integrate_canonical",
    "cartesian_to_canonical",
    "unwrap_phi",
    "field_term",
    "kinetic",
    "potential",
    "lagrangian",
    "canonical_momentum",
    "select_branch",
    "phi_rates",
    "hamilton_phi_dot",
    "euler_lagrange_rhs",
    "euler_lagrange_residual",
    "density_to_bloch",
]

POLE_TOL = 1e-9
TWO_PI = 2.0 * math.pi


class PoleError(ValueError):
    """A canonical quantity was requested inside the pole band."""


class PoleCrossingError(PoleError):
    """Direct canonical integration ran into a pole.

    ``index`` is the last good sample and ``time`` its clock time.
    """

    def __init__(self, message: str, index: int, time: float):
        super().__init__(message)
        self.index = index
        self.time = time


class BoundarySampleError(ValueError):
    pass


class AmbiguousUnwrapWarning(RuntimeWarning):
    pass


class MixedStateWarning(RuntimeWarning):
    pass


@dataclass
class CanonicalState:
    """A point (phi, eta) on the unit sphere.

    ``defined`` is False at the poles, where ``phi`` holds a sentinel.
    Fields may also hold equal-shape arrays.
    """

    phi: float
    eta: float
    defined: bool = True
    R: float = 1.0


def _in_pole_band(eta, pole_tol):
    return np.abs(eta) >= 1.0 - pole_tol


def to_canonical(r, pole_tol: float = POLE_TOL, sentinel: float = math.nan) -> CanonicalState:
    """Cartesian unit vector to (phi in [0, 2pi), eta)."""
    r = np.asarray(r, dtype=float)
    norm = float(np.linalg.norm(r))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"not a unit Bloch vector (norm {norm!r})")
    x, y, z = r
    if _in_pole_band(z, pole_tol):
        return CanonicalState(phi=sentinel, eta=float(z), defined=False)
    phi = math.atan2(y, x)
    if phi < 0:
        phi += TWO_PI
    # atan2 of a tiny negative y gives 2pi - tiny which rounds to 2pi
    if phi >= TWO_PI:
        phi = 0.0
    return CanonicalState(phi=phi, eta=float(z))


def canonical_to_cartesian(phi, eta) -> np.ndarray:
    """Vectorised (phi, eta) -> (x, y, z); arrays broadcast to ``(..., 3)``."""
    phi = np.asarray(phi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(np.abs(eta) > 1.0):
        raise ValueError("|eta| must not exceed 1")
    s = np.sqrt(1.0 - eta * eta)
    return np.stack(np.broadcast_arrays(s * np.cos(phi), s * np.sin(phi), eta), axis=-1)


def from_canonical(state: CanonicalState) -> np.ndarray:
    """Inverse of :func:`to_canonical` away from the poles."""
    if not np.isfinite(state.phi) and np.all(np.abs(state.eta) == 1.0):
        return np.array([0.0, 0.0, float(np.sign(state.eta))])
    return canonical_to_cartesian(state.phi, state.eta)


def field_term(phi, omega):
    """``Wx cos(phi) + Wy sin(phi)``, the transverse drive seen at azimuth phi."""
    w = np.asarray(omega, dtype=float)
    return w[..., 0] * np.cos(phi) + w[..., 1] * np.sin(phi)


def hamiltonian(state: CanonicalState, omega):
    w = np.asarray(omega, dtype=float)
    eta = np.asarray(state.eta, dtype=float)
    return np.sqrt(1.0 - eta * eta) * field_term(state.phi, w) + w[..., 2] * eta


def canonical_rhs(state: CanonicalState, omega, pole_tol: float = POLE_TOL):
    """Hamilton's equations, returns ``(phi_dot, eta_dot)``.

    Raises
    ------
    PoleError
        If ``eta`` is inside the pole band, where ``phi_dot`` diverges.
    """
    eta = np.asarray(state.eta, dtype=float)
    if np.any(_in_pole_band(eta, pole_tol)):
        raise PoleError(f"eta={state.eta} is within {pole_tol} of a pole")
    wx, wy, wz = (float(c) for c in np.asarray(omega, dtype=float))
    s = np.sqrt(1.0 - eta * eta)
    c, sn = np.cos(state.phi), np.sin(state.phi)
    phi_dot = -(wx * c + wy * sn) * eta / s + wz
    eta_dot = (wx * sn - wy * c) * s
    return phi_dot, eta_dot


@dataclass
class CanonicalTrajectory:
    """Time series of (phi, eta) with ``phi`` unwrapped.

    ``defined`` is False at pole samples, whose ``phi`` carries the sentinel
    (the nearest well-defined unwrapped value). ``branch`` holds the sign of
    the canonical-momentum branch when it has been selected.
    """

    times: np.ndarray
    phi: np.ndarray
    eta: np.ndarray
    defined: np.ndarray
    segment_index: np.ndarray = field(repr=False)
    boundary_mask: np.ndarray = field(repr=False)
    branch: np.ndarray | None = field(default=None, repr=False)

    @property
    def phi_wrapped(self) -> np.ndarray:
        return np.mod(self.phi, TWO_PI)

    def states(self) -> np.ndarray:
        return canonical_to_cartesian(self.phi, self.eta)


@njit(cache=True)
def _canon_f(phi, eta, wx, wy, wz):
    s = math.sqrt(1.0 - eta * eta)
    c = math.cos(phi)
    sn = math.sin(phi)
    return -(wx * c + wy * sn) * eta / s + wz, (wx * sn - wy * c) * s


@njit(cache=True)
def _canon_kernel(times, seg, gens, phi0, eta0, pole_tol, max_dphi, phi_out, eta_out):
    # returns (status, index): 0 ok, 1 pole band, 2 phi jump too large
    phi, eta = phi0, eta0
    phi_out[0] = phi
    eta_out[0] = eta
    lim = 1.0 - pole_tol
    for i in range(times.shape[0] - 1):
        h = times[i + 1] - times[i]
        k = seg[i]
        wx, wy, wz = gens[k, 0], gens[k, 1], gens[k, 2]
        a0, a1 = _canon_f(phi, eta, wx, wy, wz)
        e = eta + 0.5 * h * a1
        if abs(e) >= lim:
            return 1, i
        b0, b1 = _canon_f(phi + 0.5 * h * a0, e, wx, wy, wz)
        e = eta + 0.5 * h * b1
        if abs(e) >= lim:
            return 1, i
        c0, c1 = _canon_f(phi + 0.5 * h * b0, e, wx, wy, wz)
        e = eta + h * c1
        if abs(e) >= lim:
            return 1, i
        d0, d1 = _canon_f(phi + h * c0, e, wx, wy, wz)
        dphi = h / 6.0 * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
        eta = eta + h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
        if abs(dphi) > max_dphi:
            return 2, i
        if abs(eta) >= lim:
            return 1, i
        phi = phi + dphi
        phi_out[i + 1] = phi
        eta_out[i + 1] = eta
    return 0, times.shape[0] - 1


def integrate_canonical(
    state0: CanonicalState,
    schedule: PiecewiseGenerator,
    n_steps: int = DEFAULT_STEPS,
    pole_tol: float = POLE_TOL,
    max_phi_step: float = 0.5,
) -> CanonicalTrajectory:
    """RK4 integration of Hamilton's equations in (phi, eta).

    Uses the same boundary-aligned grid as the Cartesian integrator. A step
    that enters the pole band, or whose azimuth change exceeds
    ``max_phi_step`` radians (a pole passed between samples), raises
    :class:`PoleCrossingError`; use :func:`cartesian_to_canonical` on a
    Cartesian trajectory instead.
    """
    if schedule.batched:
        raise ValueError("integrate_canonical takes a single-member schedule")
    if _in_pole_band(state0.eta, pole_tol):
        raise PoleError(f"initial eta={state0.eta} is within {pole_tol} of a pole")
    grid = time_grid(schedule.boundaries, n_steps)
    phi = np.empty(grid.times.size)
    eta = np.empty(grid.times.size)
    status, idx = _canon_kernel(
        grid.times, grid.segment_index.astype(np.int64), np.ascontiguousarray(schedule.generators),
        float(state0.phi), float(state0.eta), pole_tol, max_phi_step, phi, eta,
    )
    if status != 0:
        why = "entered the pole band" if status == 1 else "jumped in azimuth (passed a pole)"
        raise PoleCrossingError(
            f"canonical integration {why} after t={grid.times[idx]:.6g}; use the Cartesian route",
            index=int(idx), time=float(grid.times[idx]),
        )
    return CanonicalTrajectory(
        times=grid.times, phi=phi, eta=eta, defined=np.ones(phi.size, dtype=bool),
        segment_index=grid.segment_index, boundary_mask=grid.boundary_mask,
    )


def unwrap_phi(samples, ambiguity_tol: float = 0.05, on_ambiguous: str = "warn") -> np.ndarray:
    """Remove 2pi jumps from a wrapped azimuth series.

    A step whose principal difference lies within ``ambiguity_tol`` of pi
    cannot be unwrapped reliably; ``on_ambiguous`` picks whether that warns,
    raises ``ValueError`` or is ignored.

    >>> unwrap_phi([6.2, 0.1]).round(4).tolist()
    [6.2, 6.3832]
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return samples.copy()
    step = np.diff(samples)
    principal = np.mod(step + math.pi, TWO_PI) - math.pi
    bad = np.flatnonzero(np.abs(np.abs(principal) - math.pi) < ambiguity_tol)
    if bad.size and on_ambiguous != "ignore":
        msg = f"{bad.size} ambiguous azimuth step(s) near pi, first at sample {bad[0] + 1}"
        if on_ambiguous == "raise":
            raise ValueError(msg)
        warnings.warn(msg, AmbiguousUnwrapWarning, stacklevel=2)
    return np.unwrap(samples)


def cartesian_to_canonical(traj: Trajectory, pole_tol: float = POLE_TOL, on_ambiguous: str = "warn") -> CanonicalTrajectory:
    """Canonical series from a Cartesian trajectory (the pole-safe route).

    Pole samples keep the previous unwrapped azimuth (leading pole samples
    take the first defined one) and are flagged undefined.
    """
    states = np.asarray(traj.states, dtype=float)
    if states.ndim != 2:
        raise ValueError("expected a single-member trajectory of shape (n, 3)")
    eta = states[:, 2].copy()
    defined = ~_in_pole_band(eta, pole_tol)
    phi = np.full(eta.size, np.nan)
    if np.any(defined):
        raw = np.mod(np.arctan2(states[defined, 1], states[defined, 0]), TWO_PI)
        phi[defined] = unwrap_phi(raw, on_ambiguous=on_ambiguous)
        idx = np.where(defined, np.arange(eta.size), 0)
        np.maximum.accumulate(idx, out=idx)
        first = int(np.argmax(defined))
        idx[:first] = first
        phi = phi[idx]
    return CanonicalTrajectory(
        times=np.asarray(traj.times), phi=phi, eta=eta, defined=defined,
        segment_index=np.asarray(traj.segment_index), boundary_mask=np.asarray(traj.boundary_mask),
    )


def kinetic(phi_dot, omega):
    """K = (Wz - phi_dot)**2."""
    return (np.asarray(omega, dtype=float)[..., 2] - phi_dot) ** 2


def potential(phi, omega):
    """V = -(Wx cos(phi) + Wy sin(phi))**2."""
    return -field_term(phi, omega) ** 2


def lagrangian(phi, phi_dot, omega, branch=1):
    """L = -branch * sqrt(K - V).

    The Legendre transform of H is single valued only branch by branch: along
    a trajectory ``eta*phi_dot - H`` equals this with ``branch`` the sign of
    ``Wx cos(phi) + Wy sin(phi)``. ``branch=1`` gives the principal form.
    """
    return -np.asarray(branch) * np.sqrt(kinetic(phi_dot, omega) - potential(phi, omega))


def canonical_momentum(phi, phi_dot, omega):
    """Both branches of ``dL/dphi_dot``, returned as ``(p_plus, p_minus)``.

    Raises
    ------
    ZeroDivisionError
        Where ``K - V`` vanishes.
    """
    num = np.asarray(omega, dtype=float)[..., 2] - phi_dot
    den = np.sqrt(kinetic(phi_dot, omega) - potential(phi, omega))
    if np.any(den == 0.0):
        raise ZeroDivisionError("canonical momentum undefined where (Wz - phi_dot)**2 + V = 0")
    p = num / den
    return p, -p


@dataclass
class BranchSelection:
    momentum: np.ndarray
    branch: np.ndarray
    hop_times: np.ndarray
    numerator_zeros: np.ndarray
    denominator: np.ndarray


def select_branch(times, phi, phi_dot, eta, omegas) -> BranchSelection:
    """Pick, sample by sample, the momentum branch whose sign matches ``eta``.

    ``omegas`` is the generator at each sample, shape ``(n, 3)``. Hops are
    the sample times where the selected branch changes sign. ``denominator``
    is ``sqrt(K - V)``; where it is small the momentum is ill-conditioned
    with respect to ``phi_dot``. Zero crossings
    of the numerator ``Wz - phi_dot`` (where both branches meet at zero) are
    reported separately; they are not hops.
    """
    times = np.asarray(times, dtype=float)
    p_plus, _ = canonical_momentum(phi, phi_dot, omegas)
    branch = np.where(p_plus * np.asarray(eta) >= 0.0, 1, -1).astype(np.int8)
    momentum = branch * p_plus
    hops = times[1:][branch[1:] != branch[:-1]]
    num = np.asarray(omegas)[..., 2] - phi_dot
    zeros = times[1:][np.sign(num[1:]) * np.sign(num[:-1]) < 0]
    den = np.sqrt(kinetic(phi_dot, omegas) - potential(phi, omegas))
    return BranchSelection(momentum=momentum, branch=branch, hop_times=hops, numerator_zeros=zeros, denominator=den)


def _second_diffs(t, y):
    hm = t[1:-1] - t[:-2]
    hp = t[2:] - t[1:-1]
    d1 = (hm**2 * y[2:] - hp**2 * y[:-2] + (hp**2 - hm**2) * y[1:-1]) / (hm * hp * (hm + hp))
    d2 = 2.0 * ((y[2:] - y[1:-1]) / hp - (y[1:-1] - y[:-2]) / hm) / (hm + hp)
    return d1, d2


def phi_rates(traj: CanonicalTrajectory):
    """Central-difference ``(phi_dot, phi_ddot)`` at samples 1..n-2 (nonuniform-safe)."""
    return _second_diffs(np.asarray(traj.times), np.asarray(traj.phi))


def hamilton_phi_dot(traj: CanonicalTrajectory, schedule: PiecewiseGenerator) -> np.ndarray:
    """Exact ``phi_dot`` at every sample from Hamilton's equations.

    Unlike :func:`phi_rates` this carries no discretisation error. Pole
    samples give NaN.
    """
    eta = np.asarray(traj.eta, dtype=float)
    w = schedule.generators[np.asarray(traj.segment_index)]
    rho = np.sqrt(1.0 - eta * eta)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = w[:, 2] - field_term(traj.phi, w) * eta / rho
    out[~np.asarray(traj.defined)] = np.nan
    return out


def euler_lagrange_rhs(phi, phi_dot, omega):
    """Acceleration implied by the Euler-Lagrange equation of the reduced Lagrangian.

    Without transverse drive (``Wx = Wy = 0``) the angular factor of the
    numerator vanishes identically and the RHS is taken as 0.
    """
    w = np.asarray(omega, dtype=float)
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    a = wx * np.cos(phi) + wy * np.sin(phi)
    num = (a * a + (wz - phi_dot) * (wz - 2.0 * phi_dot)) * (
        (wy * wy - wx * wx) * np.sin(2.0 * phi) + 2.0 * wx * wy * np.cos(2.0 * phi)
    )
    free = (wx == 0.0) & (wy == 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(free, 0.0, num / (2.0 * a * a))
    return out if out.ndim else float(out)


@dataclass
class ELResidual:
    times: np.ndarray
    residual: np.ndarray
    valid: np.ndarray

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual[self.valid])))


def euler_lagrange_residual(
    traj: CanonicalTrajectory,
    schedule: PiecewiseGenerator,
    indices=None,
    degenerate_tol: float = 1e-3,
    eta_max: float | None = None,
) -> ELResidual:
    """``phi_ddot - RHS`` with derivatives from central differences.

    Only samples strictly inside a segment are evaluated: segment boundaries,
    the two end samples and pole samples are excluded (NaN, ``valid`` False).
    Asking for a boundary sample explicitly through ``indices`` raises
    :class:`BoundarySampleError`.

    Samples with ``|Wx cos(phi) + Wy sin(phi)| < degenerate_tol`` are excluded
    too. There ``d2L/dphi_dot2`` vanishes, the equation cannot be solved for
    ``phi_ddot`` and the RHS amplifies any error in ``phi_dot`` by ``1/a**2``.
    ``eta_max`` optionally drops samples closer to a pole, where curvature
    grows like ``(1 - eta**2)**-1.5``.
    """
    n = traj.times.size
    if indices is not None:
        indices = np.atleast_1d(np.asarray(indices, dtype=int))
        if np.any(indices <= 0) or np.any(indices >= n - 1):
            raise BoundarySampleError("central differences need both neighbours")
        if np.any(traj.boundary_mask[indices]):
            raise BoundarySampleError(f"sample(s) {indices[traj.boundary_mask[indices]].tolist()} lie on segment boundaries")
    phi_dot, phi_ddot = phi_rates(traj)
    inner = np.arange(1, n - 1)
    omegas = schedule.generators[traj.segment_index[inner]]
    rhs = euler_lagrange_rhs(traj.phi[inner], phi_dot, omegas)
    residual = np.full(n, np.nan)
    residual[inner] = phi_ddot - rhs
    valid = np.zeros(n, dtype=bool)
    valid[inner] = True
    valid &= ~traj.boundary_mask
    valid &= traj.defined
    valid[1:] &= traj.defined[:-1]
    valid[:-1] &= traj.defined[1:]
    valid[inner] &= np.abs(field_term(traj.phi[inner], omegas)) >= degenerate_tol
    if eta_max is not None:
        valid &= np.abs(traj.eta) <= eta_max
    if indices is not None:
        keep = np.zeros(n, dtype=bool)
        keep[indices] = True
        valid &= keep
    residual[~valid] = np.nan
    return ELResidual(times=np.asarray(traj.times), residual=residual, valid=valid)


def density_to_bloch(rho, tol: float = 1e-12) -> np.ndarray:
    """Bloch vector of a 2x2 density matrix, index 0 being the north-pole state.

    Mixed states (purity below 1) trigger :class:`MixedStateWarning`; they lie
    inside the ball and are outside the pure-state analyses.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError("density matrix must be 2x2")
    if not np.allclose(rho, rho.conj().T, atol=tol):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol:
        raise ValueError(f"density matrix trace is {np.trace(rho).real}, not 1")
    r = np.array([
        (rho[0, 1] + rho[1, 0]).real,
        (1j * (rho[0, 1] - rho[1, 0])).real,
        (rho[0, 0] - rho[1, 1]).real,
    ])
    purity = float(np.trace(rho @ rho).real)
    if purity < 1.0 - 1e-9:
        warnings.warn(f"mixed state (purity {purity:.6g}) maps inside the Bloch ball", MixedStateWarning, stacklevel=2)
    return r
