"""Finite-difference stability matrices, range parameters and caustics.

A swarm is a central trajectory plus satellite trajectories seeded at t=0
with a small shift along one canonical direction. Differences between them
are measured at an analysis start ``t_i`` (where the dynamics has spread them
out) and at each final time ``t_f``; their ratio is the stability element
``d zeta_f / d zeta_i``.

Two differencing schemes are available. ``"forward"`` compares the central
trajectory with one satellite. ``"central"`` (the default) compares two
satellites placed symmetrically about the central point, which cancels the
leading nonlinearity of the finite difference. For the eta direction the
central point is the pole itself, so the symmetric pair sits at azimuths
``phi0`` and ``phi0 + pi``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .canonical import CanonicalState, CanonicalTrajectory, POLE_TOL, PoleError, canonical_to_cartesian
from .pulse_dsl import PulseSequence
from .rotating_frame import EnsembleMember, propagator_at, propagator_between

__all__ = [
    "DEGENERATE_TOL",
    "ALIGNMENT_TOL",
    "SwarmSpec",
    "ResolvedSwarm",
    "StabilitySeries",
    "BinnedAverages",
    "ImperfectionResult",
    "DegenerateSeparationError",
    "MisalignedSwarmError",
    "NonUniformGridWarning",
    "finite_diff_element",
    "run_swarm",
    "average_stability",
    "range_parameter",
    "range_curve",
    "stability_matrices",
    "spherical_stability_matrix",
    "jacobian",
    "inverse_jacobian",
    "jacobians",
    "embed",
    "cartesian_stability",
    "cartesian_fd_stability",
    "imperfection_measure",
]

DEGENERATE_TOL = 1e-12
ALIGNMENT_TOL = 1e-6
PHI, ETA = "phi", "eta"


class DegenerateSeparationError(ValueError):
    pass


class MisalignedSwarmError(ValueError):
    pass


class NonUniformGridWarning(RuntimeWarning):
    pass


def _principal(d):
    return np.mod(np.asarray(d) + math.pi, 2 * math.pi) - math.pi


@dataclass(frozen=True)
class SwarmSpec:
    """How to seed and read out one swarm.

    Parameters
    ----------
    direction : {"phi", "eta"}
    phi0 : float or None
        Azimuth of the central point. None places it a quarter turn ahead of
        the first segment's axis, the direction in which the first pulse
        carries the pole region.
    eta0 : float or None
        Height of the central point; None gives 1 for eta swarms and
        ``1 - epsilon`` for phi swarms.
    shift : float or None
        Seeded separation; None gives 2e-6 (eta) or 1e-6 (phi).
    epsilon : float
        Pole offset of phi swarms.
    scheme : {"central", "forward"}
    t_i_fraction : float
        Analysis start as a fraction of the total duration.
    n_tf : int
        Number of uniform final times from ``t_i`` to the end.
    """

    direction: str = ETA
    phi0: float | None = None
    eta0: float | None = None
    shift: float | None = None
    epsilon: float = 1e-6
    scheme: str = "central"
    t_i_fraction: float = 0.25
    n_tf: int = 97

    def __post_init__(self):
        if self.direction not in (PHI, ETA):
            raise ValueError(f"direction must be 'phi' or 'eta', got {self.direction!r}")
        if self.scheme not in ("central", "forward"):
            raise ValueError(f"scheme must be 'central' or 'forward', got {self.scheme!r}")
        if self.shift is not None and not self.shift > 0:
            raise ValueError("shift must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 <= self.t_i_fraction <= 1.0:
            raise ValueError("t_i_fraction must lie in [0, 1]")
        if self.n_tf < 1:
            raise ValueError("n_tf must be at least 1")

    def halved(self) -> "SwarmSpec":
        return replace(self, shift=self.resolved_shift / 2)

    @property
    def resolved_shift(self) -> float:
        if self.shift is not None:
            return self.shift
        return 2e-6 if self.direction == ETA else 1e-6

    def resolve(self, sequence: PulseSequence) -> "ResolvedSwarm":
        phi0 = self.phi0
        if phi0 is None:
            phi0 = sequence.segments[0].axis_phase + math.pi / 2
        eta0 = self.eta0
        if eta0 is None:
            eta0 = 1.0 if self.direction == ETA else 1.0 - self.epsilon
        total = sequence.total_duration
        t_i = self.t_i_fraction * total
        if self.n_tf == 1:
            t_f = np.array([t_i])
        else:
            t_f = t_i + (total - t_i) * np.arange(self.n_tf) / (self.n_tf - 1)
            t_f[-1] = total
        return ResolvedSwarm(self, float(phi0), float(eta0), self.resolved_shift, t_i, t_f)


@dataclass(frozen=True)
class ResolvedSwarm:
    spec: SwarmSpec
    phi0: float
    eta0: float
    shift: float
    t_i: float
    t_f: np.ndarray = field(repr=False)

    def seeds(self) -> np.ndarray:
        """Initial points ``(central, plus, minus)`` as Cartesian vectors.

        For the forward scheme the minus point is the central point, so every
        difference is ``plus - minus``.
        """
        p, e, d = self.phi0, self.eta0, self.shift
        if self.spec.direction == ETA:
            if self.spec.scheme == "central":
                if e != 1.0:
                    plus, minus = (p, e + d), (p, e - d)
                else:
                    plus, minus = (p, e - d), (p + math.pi, e - d)
            else:
                plus, minus = (p, e - d), (p, e)
        else:
            if self.spec.scheme == "central":
                plus, minus = (p + d, e), (p - d, e)
            else:
                plus, minus = (p + d, e), (p, e)
        pts = np.array([(p, e), plus, minus])
        out = canonical_to_cartesian(pts[:, 0], pts[:, 1])
        if e == 1.0:
            out[0] = (0.0, 0.0, 1.0)
        if self.spec.scheme == "forward":
            out[2] = out[0]
        return out


@dataclass
class StabilitySeries:
    """Swarm read-out for one direction over an ensemble.

    Attributes
    ----------
    elements : ndarray, shape (n_members, n_tf)
        Heller ratios ``d zeta_f / d zeta_i``.
    d_i : ndarray, shape (n_members, 2)
        Satellite separation ``(d phi, d eta)`` at ``t_i``.
    d_f : ndarray, shape (n_members, n_tf, 2)
        Separation at each final time, azimuth unwrapped along the grid.
    central_i, central_f : ndarray
        Central point ``(phi, eta)`` at ``t_i`` and at each final time.
    misalignment : ndarray, shape (n_members,)
        Transverse-to-parallel ratio of the separation at ``t_i``.
    """

    direction: str
    t_i: float
    t_f: np.ndarray
    w: np.ndarray
    member_index: np.ndarray
    elements: np.ndarray
    d_i: np.ndarray = field(repr=False)
    d_f: np.ndarray = field(repr=False)
    central_i: np.ndarray = field(repr=False)
    central_f: np.ndarray = field(repr=False)
    misalignment: np.ndarray = field(repr=False)
    spec: SwarmSpec | None = field(default=None, repr=False)

    @property
    def n_members(self) -> int:
        return self.elements.shape[0]

    def tf_index(self, t_f: float) -> int:
        k = int(np.argmin(np.abs(self.t_f - t_f)))
        if abs(self.t_f[k] - t_f) > 1e-9 * max(1.0, abs(t_f)):
            raise ValueError(f"t_f={t_f} is not on the analysis grid")
        return k


def _sample_index(times, t):
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"t={t} is not a trajectory sample")
    return k


def finite_diff_element(
    central: CanonicalTrajectory,
    satellite: CanonicalTrajectory,
    spec: SwarmSpec,
    t_f: float,
    t_i: float | None = None,
) -> float:
    """Heller ratio ``(zeta_sat - zeta_cen)(t_f) / (zeta_sat - zeta_cen)(t_i)``.

    For ``phi`` the difference is taken between unwrapped series, anchored to
    the principal value at ``t_i``. ``t_i`` defaults to the standard fraction of
    the trajectories' last time.
    """
    times = np.asarray(central.times)
    if t_i is None:
        t_i = spec.t_i_fraction * float(times[-1])
    i = _sample_index(times, t_i)
    f = _sample_index(times, t_f)
    if spec.direction == ETA:
        d_i = satellite.eta[i] - central.eta[i]
        d_f = satellite.eta[f] - central.eta[f]
    else:
        d_i = float(_principal(satellite.phi[i] - central.phi[i]))
        d_f = d_i + (satellite.phi[f] - satellite.phi[i]) - (central.phi[f] - central.phi[i])
    if abs(d_i) < DEGENERATE_TOL:
        raise DegenerateSeparationError(f"|d{spec.direction}_i| = {abs(d_i):.3g} below {DEGENERATE_TOL}")
    if f == i:
        return 1.0
    return float(d_f / d_i)


def _canon(r):
    phi = np.mod(np.arctan2(r[..., 1], r[..., 0]), 2 * math.pi)
    return phi, r[..., 2]


def _member_swarm(resolved: ResolvedSwarm, sequence: PulseSequence, member: EnsembleMember, seeds):
    P_i = propagator_at(sequence, member, resolved.t_i)
    r_i = seeds @ P_i.T
    phi_i, eta_i = _canon(r_i)
    n_tf = resolved.t_f.size
    phi_f = np.empty((n_tf, 3))
    eta_f = np.empty((n_tf, 3))
    for k, t in enumerate(resolved.t_f):
        # propagate the t_i states so that t_f = t_i reproduces them exactly
        r = r_i @ propagator_between(sequence, member, resolved.t_i, t).T if t != resolved.t_i else r_i
        phi_f[k], eta_f[k] = _canon(r)
    d_i = np.array([_principal(phi_i[1] - phi_i[2]), eta_i[1] - eta_i[2]])
    dphi = _principal(phi_f[:, 1] - phi_f[:, 2])
    # unwrap the separation along the t_f grid starting from the t_i value
    dphi = np.unwrap(np.concatenate([[d_i[0]], dphi]))[1:]
    d_f = np.column_stack([dphi, eta_f[:, 1] - eta_f[:, 2]])
    if resolved.t_f[0] == resolved.t_i:
        d_f[0] = d_i
    central_i = np.array([phi_i[0], eta_i[0]])
    central_f = np.column_stack([phi_f[:, 0], eta_f[:, 0]])
    # separation component across the swarm direction, in tangent-plane units
    rho = math.sqrt(max(0.0, 1.0 - eta_i[0] ** 2))
    across = abs(d_i[1]) if resolved.spec.direction == PHI else abs(d_i[0]) * rho
    along = abs(d_i[0]) * rho if resolved.spec.direction == PHI else abs(d_i[1])
    mis = across / along if along > 0 else math.inf
    return d_i, d_f, central_i, central_f, mis


def run_swarm(spec: SwarmSpec, sequence: PulseSequence, ensemble, workers: int = 1) -> StabilitySeries:
    """Propagate the swarm for every member and read out the elements.

    ``ensemble`` is an :class:`~bloch_caustics.ensemble.Ensemble` or a list
    of members. For a field-inhomogeneity ensemble the eta swarm must stay
    aligned with the eta direction at ``t_i``; this is checked and
    :class:`MisalignedSwarmError` raised otherwise.
    """
    members = list(getattr(ensemble, "members", ensemble))
    if not members:
        raise ValueError("empty ensemble")
    kind = getattr(ensemble, "kind", None)
    w = np.asarray(getattr(ensemble, "parameters", [m.field_scale if m.offset == 0 else m.offset for m in members]), dtype=float)
    resolved = spec.resolve(sequence)
    seeds = resolved.seeds()

    def work(m):
        return _member_swarm(resolved, sequence, m, seeds)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, members))
    else:
        results = [work(m) for m in members]

    d_i = np.array([r[0] for r in results])
    d_f = np.array([r[1] for r in results])
    central_i = np.array([r[2] for r in results])
    central_f = np.array([r[3] for r in results])
    mis = np.array([r[4] for r in results])
    col = 0 if spec.direction == PHI else 1
    if np.any(np.abs(d_i[:, col]) < DEGENERATE_TOL):
        j = int(np.argmax(np.abs(d_i[:, col]) < DEGENERATE_TOL))
        raise DegenerateSeparationError(
            f"member {members[j].index}: |d{spec.direction}_i| = {abs(d_i[j, col]):.3g} below {DEGENERATE_TOL}"
        )
    field_only = kind == "field_inhomogeneity" or (kind is None and all(m.offset == 0 for m in members))
    if spec.direction == ETA and field_only and np.any(mis > ALIGNMENT_TOL):
        j = int(np.argmax(mis))
        raise MisalignedSwarmError(f"member {members[j].index}: eta swarm misaligned at t_i (ratio {mis[j]:.3g})")
    elements = d_f[:, :, col] / d_i[:, col][:, None]
    elements[:, resolved.t_f == resolved.t_i] = 1.0
    return StabilitySeries(
        direction=spec.direction,
        t_i=resolved.t_i,
        t_f=resolved.t_f,
        w=w,
        member_index=np.array([m.index for m in members]),
        elements=elements,
        d_i=d_i,
        d_f=d_f,
        central_i=central_i,
        central_f=central_f,
        misalignment=mis,
        spec=spec,
    )


@dataclass
class BinnedAverages:
    """Per-bin normalised trapezoid means, shape ``(n_bins, n_tf)``."""

    t_f: np.ndarray
    edges: np.ndarray
    averages: np.ndarray
    counts: np.ndarray

    @property
    def absolute(self) -> np.ndarray:
        return np.abs(self.averages)


def average_stability(series: StabilitySeries, n_bins: int = 20) -> BinnedAverages:
    """Average each element over equal sub-intervals of the parameter range.

    Members on a shared edge belong to both neighbouring bins. Within a bin
    the element is integrated over ``w`` by the trapezoid rule and divided by
    the span of the members in it; a bin holding one member returns that
    member's value.
    """
    w = np.asarray(series.w, dtype=float)
    if np.any(np.diff(w) <= 0):
        raise ValueError("members must be sorted by strictly increasing w")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    edges = np.linspace(w[0], w[-1], n_bins + 1)
    tol = 1e-9 * (w[-1] - w[0])
    out = np.empty((n_bins, series.t_f.size))
    counts = np.empty(n_bins, dtype=int)
    for b in range(n_bins):
        sel = (w >= edges[b] - tol) & (w <= edges[b + 1] + tol)
        counts[b] = int(sel.sum())
        if counts[b] == 0:
            raise ValueError(f"bin {b} [{edges[b]:.6g}, {edges[b + 1]:.6g}] holds no members")
        ws, el = w[sel], series.elements[sel]
        if counts[b] == 1:
            out[b] = el[0]
        else:
            out[b] = np.trapezoid(el, ws, axis=0) / (ws[-1] - ws[0])
    return BinnedAverages(t_f=series.t_f, edges=edges, averages=out, counts=counts)


def range_parameter(series: StabilitySeries, t_f: float) -> float:
    """Max minus min of the raw elements over the ensemble at ``t_f``."""
    if series.n_members == 0:
        raise ValueError("empty series")
    col = series.elements[:, series.tf_index(t_f)]
    return float(col.max() - col.min())


def range_curve(series: StabilitySeries) -> np.ndarray:
    if series.n_members == 0:
        raise ValueError("empty series")
    return series.elements.max(axis=0) - series.elements.min(axis=0)


def stability_matrices(phi_series: StabilitySeries, eta_series: StabilitySeries) -> np.ndarray:
    """Spherical stability matrices from a phi swarm and an eta swarm.

    Rows are ``(phi_f, eta_f)`` and columns ``(phi_i, eta_i)``. The matrix
    solves ``M @ D_i = D_f`` where the columns of ``D`` are the two swarm
    separations, which reduces to the Heller ratios when the separations are
    aligned with the coordinate directions. Shape ``(n_members, n_tf, 2, 2)``.
    """
    if phi_series.direction != PHI or eta_series.direction != ETA:
        raise ValueError("expected a phi series and an eta series")
    if not np.array_equal(phi_series.t_f, eta_series.t_f):
        raise ValueError("swarms use different t_f grids")
    # columns of D are the (phi, eta) separations of the phi and eta swarms
    a, c = phi_series.d_i[:, 0, None], phi_series.d_i[:, 1, None]
    b, d = eta_series.d_i[:, 0, None], eta_series.d_i[:, 1, None]
    p, r = phi_series.d_f[..., 0], phi_series.d_f[..., 1]
    q, s = eta_series.d_f[..., 0], eta_series.d_f[..., 1]
    det = a * d - b * c
    # D_f @ adj(D_i) / det(D_i), written out so that D_f = D_i gives I exactly
    M = np.empty(p.shape + (2, 2))
    M[..., 0, 0] = (p * d - q * c) / det
    M[..., 0, 1] = (q * a - p * b) / det
    M[..., 1, 0] = (r * d - s * c) / det
    M[..., 1, 1] = (s * a - r * b) / det
    return M


def spherical_stability_matrix(
    member: EnsembleMember,
    sequence: PulseSequence,
    specs: tuple[SwarmSpec, SwarmSpec] | None = None,
):
    """``(t_f, M_s)`` for one member, ``M_s`` of shape ``(n_tf, 2, 2)``."""
    if specs is None:
        specs = (SwarmSpec(PHI), SwarmSpec(ETA))
    by_dir = {s.direction: s for s in specs}
    sp = run_swarm(by_dir[PHI], sequence, [member])
    se = run_swarm(by_dir[ETA], sequence, [member])
    return sp.t_f, stability_matrices(sp, se)[0]


def _rho(eta, pole_tol):
    rho2 = 1.0 - np.asarray(eta, dtype=float) ** 2
    if np.any(rho2 <= (1.0 - (1.0 - pole_tol) ** 2)):
        raise PoleError("Jacobian is singular at the poles")
    return np.sqrt(rho2)


def jacobian(phi, eta, pole_tol: float = POLE_TOL) -> np.ndarray:
    """``d(x, y, z) / d(R, phi, eta)`` on the unit sphere, with ``eta = z / R``."""
    rho = _rho(eta, pole_tol)
    c, s = math.cos(phi), math.sin(phi)
    return np.array([
        [rho * c, -rho * s, -eta * c / rho],
        [rho * s, rho * c, -eta * s / rho],
        [eta, 0.0, 1.0],
    ])


def inverse_jacobian(phi, eta, pole_tol: float = POLE_TOL) -> np.ndarray:
    """``d(R, phi, eta) / d(x, y, z)`` on the unit sphere."""
    rho = _rho(eta, pole_tol)
    c, s = math.cos(phi), math.sin(phi)
    return np.array([
        [rho * c, rho * s, eta],
        [-s / rho, c / rho, 0.0],
        [-eta * rho * c, -eta * rho * s, rho * rho],
    ])


def jacobians(state_i: CanonicalState, state_f: CanonicalState, pole_tol: float = POLE_TOL):
    """``(J_f, J_i^-1)`` for the Cartesian chain rule."""
    return jacobian(state_f.phi, state_f.eta, pole_tol), inverse_jacobian(state_i.phi, state_i.eta, pole_tol)


def embed(M_s) -> np.ndarray:
    """Put a 2x2 (phi, eta) block into 3x3 with a unit radial entry."""
    M_s = np.asarray(M_s, dtype=float)
    out = np.zeros(M_s.shape[:-2] + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1:, 1:] = M_s
    return out


def cartesian_stability(M_s, J_f, J_i_inv) -> np.ndarray:
    """``J_f @ M_s @ J_i^-1`` with the radial row and column added."""
    return np.asarray(J_f) @ embed(M_s) @ np.asarray(J_i_inv)


def cartesian_fd_stability(sequence: PulseSequence, member: EnsembleMember, r_i, t_i: float, t_f: float, delta: float = 1e-6) -> np.ndarray:
    """Cartesian stability matrix by central differences of perturbed states.

    Each Cartesian component of ``r_i`` (the state at ``t_i``) is displaced
    by ``+-delta`` and carried to ``t_f`` independently of any canonical
    coordinates.
    """
    r_i = np.asarray(r_i, dtype=float)
    cols = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = delta
        plus = propagator_between(sequence, member, t_i, t_f) @ (r_i + e)
        minus = propagator_between(sequence, member, t_i, t_f) @ (r_i - e)
        cols.append((plus - minus) / (2 * delta))
    return np.column_stack(cols)


@dataclass
class ImperfectionResult:
    """Sensitivity ``dr_f/dw`` of each member's state at ``t_f``.

    ``consistency`` is ``1 - |cos|`` of the angle between ``W`` and
    ``M_c @ dr_i/dw``, with ``M_c`` the Cartesian stability matrix from
    ``t_i`` to ``t_f``: a direction-only check of the proportionality
    between the imperfection measure and the stability matrix.
    """

    w: np.ndarray
    t_f: float
    W: np.ndarray
    nonuniform: bool
    consistency: np.ndarray | None = None

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.W, axis=1)


def imperfection_measure(ensemble, sequence: PulseSequence, t_f: float, t_i: float | None = None) -> ImperfectionResult:
    """Finite-difference ``dr_f/dw`` across neighbouring members.

    Central differences in the interior, one-sided at the two ends; a
    non-uniform ``w`` grid is handled by the nonuniform stencil and flagged.
    """
    from .ensemble import ensemble_states_at

    members = list(ensemble.members)
    if len(members) < 3:
        raise ValueError("need at least 3 members for central differences")
    w = np.asarray(ensemble.parameters, dtype=float)
    if np.any(np.diff(w) <= 0):
        raise ValueError("members must be sorted by strictly increasing w")
    steps = np.diff(w)
    nonuniform = bool(np.ptp(steps) > 1e-9 * np.abs(steps).max())
    if nonuniform:
        warnings.warn("non-uniform parameter grid; using nonuniform differences", NonUniformGridWarning, stacklevel=2)
    r_f = ensemble_states_at(ensemble, sequence, [t_f])[0]
    W = np.gradient(r_f, w, axis=0, edge_order=1)
    consistency = None
    if t_i is not None:
        r_i = ensemble_states_at(ensemble, sequence, [t_i])[0]
        dr_i = np.gradient(r_i, w, axis=0, edge_order=1)
        consistency = np.empty(len(members))
        for j, m in enumerate(members):
            pred = propagator_between(sequence, m, t_i, t_f) @ dr_i[j]
            den = np.linalg.norm(pred) * np.linalg.norm(W[j])
            consistency[j] = 1.0 - abs(pred @ W[j]) / den if den > 0 else math.nan
    return ImperfectionResult(w=w, t_f=float(t_f), W=W, nonuniform=nonuniform, consistency=consistency)
