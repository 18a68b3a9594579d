"""Experiment configuration, orchestration and deterministic result files.

Configuration files are flat ``key = value`` text with optional ``[section]``
headers; a key inside ``[stability]`` is the same as ``stability.key`` at top
level. ``#`` starts a comment outside quotes. Every omitted key takes its
default, and unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import shlex
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bloch_ode import PiecewiseGenerator
from .canonical import (
    CanonicalState,
    PoleCrossingError,
    cartesian_to_canonical,
    canonical_to_cartesian,
    hamilton_phi_dot,
    hamiltonian,
    integrate_canonical,
    select_branch,
)
from .ensemble import (
    ENSEMBLE_DEFAULTS,
    FIELD,
    OFFSET,
    default_patch,
    make_ensemble,
    patch_area,
    segment_width_report,
    width_series,
)
from .pulse_dsl import LEVITT, PulseSyntaxError, SequenceError, parse_sequence
from .rotating_frame import EnsembleMember, sequence_omegas, trajectory
from .stability import (
    SwarmSpec,
    average_stability,
    imperfection_measure,
    range_curve,
    run_swarm,
    stability_matrices,
)

__all__ = [
    "ANALYSES",
    "ConfigError",
    "InvariantError",
    "ExperimentConfig",
    "Report",
    "parse_config",
    "load_config",
    "run_experiment",
    "emit_histogram",
    "write_csv",
]

ANALYSES = ("trajectories", "canonical", "stability", "width", "area", "imperfection")
NORM_TOL = 1e-9
ENERGY_TOL = 1e-9


class ConfigError(ValueError):
    """Bad configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class InvariantError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    sequence: str = LEVITT
    nominal_field: float = 1.0
    n_steps: int = 100_000
    analyses: tuple = ANALYSES
    ensemble_kind: str = FIELD
    ensemble_min: float | None = None
    ensemble_max: float | None = None
    ensemble_count: int | None = None
    t_i: float = 0.25
    n_tf: int = 97
    delta_phi0: float = 1e-6
    delta_eta0: float = 2e-6
    epsilon: float = 1e-6
    scheme: str = "central"
    phi0: float | None = None
    bins_average: int = 20
    bins_histogram: int = 50
    canonical_phi0_pi: float = 0.6
    canonical_eta0: float = 0.5
    area_n_points: int = 400
    area_n_times: int = 201
    output_dir: str = "results"
    output_formats: tuple = ("csv", "json")
    output_stride: int = 100

    @property
    def w_range(self):
        lo, hi, n = ENSEMBLE_DEFAULTS[self.ensemble_kind]
        return (
            lo if self.ensemble_min is None else self.ensemble_min,
            hi if self.ensemble_max is None else self.ensemble_max,
            n if self.ensemble_count is None else self.ensemble_count,
        )

    def echo(self) -> dict:
        """Fully resolved settings, as recorded in the manifest."""
        d = asdict(self)
        lo, hi, n = self.w_range
        d.update(ensemble_min=lo, ensemble_max=hi, ensemble_count=n)
        d["analyses"] = list(self.analyses)
        d["output_formats"] = list(self.output_formats)
        return d


def _as_float(v):
    return float(v)


def _as_int(v):
    if not re.fullmatch(r"[+-]?\d+", v):
        raise ValueError(f"{v!r} is not an integer")
    return int(v)


def _as_list(v):
    return tuple(p.strip() for p in v.split(",") if p.strip())


def _as_phi0(v):
    return None if v.lower() == "auto" else float(v)


# config key -> (field name, converter)
_KEYS = {
    "sequence": ("sequence", str),
    "nominal_field": ("nominal_field", _as_float),
    "n_steps": ("n_steps", _as_int),
    "analyses": ("analyses", _as_list),
    "ensemble.kind": ("ensemble_kind", str),
    "ensemble.min": ("ensemble_min", _as_float),
    "ensemble.max": ("ensemble_max", _as_float),
    "ensemble.count": ("ensemble_count", _as_int),
    "stability.t_i": ("t_i", _as_float),
    "stability.n_tf": ("n_tf", _as_int),
    "stability.delta_phi0": ("delta_phi0", _as_float),
    "stability.delta_eta0": ("delta_eta0", _as_float),
    "stability.epsilon": ("epsilon", _as_float),
    "stability.scheme": ("scheme", str),
    "stability.phi0": ("phi0", _as_phi0),
    "bins.average": ("bins_average", _as_int),
    "bins.histogram": ("bins_histogram", _as_int),
    "canonical.phi0_pi": ("canonical_phi0_pi", _as_float),
    "canonical.eta0": ("canonical_eta0", _as_float),
    "area.n_points": ("area_n_points", _as_int),
    "area.n_times": ("area_n_times", _as_int),
    "output.dir": ("output_dir", str),
    "output.formats": ("output_formats", _as_list),
    "output.stride": ("output_stride", _as_int),
}


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _unquote(v: str, lineno: int) -> str:
    if v[:1] in "\"'":
        try:
            parts = shlex.split(v)
        except ValueError as exc:
            raise ConfigError(f"bad quoting: {exc}", lineno) from None
        if len(parts) != 1:
            raise ConfigError(f"expected a single quoted value, got {v!r}", lineno)
        return parts[0]
    return v


def _check(cfg: ExperimentConfig, lines: dict):
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", lines.get(key))

    try:
        parse_sequence(cfg.sequence, cfg.nominal_field)
    except (PulseSyntaxError, SequenceError) as exc:
        fail("sequence", str(exc))
    if not cfg.nominal_field > 0:
        fail("nominal_field", "must be positive")
    if cfg.n_steps < 1:
        fail("n_steps", "must be positive")
    bad = [a for a in cfg.analyses if a not in ANALYSES]
    if bad or not cfg.analyses:
        fail("analyses", f"unknown or empty analyses {bad}; choose from {', '.join(ANALYSES)}")
    if cfg.ensemble_kind not in ENSEMBLE_DEFAULTS:
        fail("ensemble.kind", f"must be one of {', '.join(sorted(ENSEMBLE_DEFAULTS))}")
    lo, hi, n = cfg.w_range
    if not lo < hi:
        fail("ensemble.min", f"range [{lo}, {hi}] is empty")
    if n < 3:
        fail("ensemble.count", "need at least 3 members")
    if cfg.ensemble_kind == FIELD and lo <= 0:
        fail("ensemble.min", "field scales must be positive")
    if not 0 <= cfg.t_i <= 1:
        fail("stability.t_i", "is a fraction of the total duration in [0, 1]")
    if cfg.n_tf < 2:
        fail("stability.n_tf", "need at least 2 final times")
    for key, v in (("stability.delta_phi0", cfg.delta_phi0), ("stability.delta_eta0", cfg.delta_eta0)):
        if not v > 0:
            fail(key, "must be positive")
    if cfg.epsilon < 0:
        fail("stability.epsilon", "must be non-negative")
    if cfg.scheme not in ("central", "forward"):
        fail("stability.scheme", "must be central or forward")
    for key, v in (("bins.average", cfg.bins_average), ("bins.histogram", cfg.bins_histogram),
                   ("area.n_points", cfg.area_n_points - 3), ("area.n_times", cfg.area_n_times),
                   ("output.stride", cfg.output_stride)):
        if v < 1:
            fail(key, "value too small")
    if not -1 < cfg.canonical_eta0 < 1:
        fail("canonical.eta0", "must lie strictly between -1 and 1")
    bad = [f for f in cfg.output_formats if f not in ("csv", "json")]
    if bad:
        fail("output.formats", f"unknown formats {bad}")


def parse_config(text: str, strict: bool = True) -> ExperimentConfig:
    """Parse configuration text. Non-strict mode ignores unknown keys."""
    values, lines = {}, {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*([A-Za-z_][\w.]*)\s*\]", line)
        if m:
            section = m.group(1)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not re.fullmatch(r"[A-Za-z_][\w.]*", key):
            raise ConfigError(f"invalid key {key!r}", lineno)
        full = f"{section}.{key}" if section else key
        if full not in _KEYS:
            if strict:
                raise ConfigError(f"unknown key {full!r}", lineno)
            continue
        if full in values:
            raise ConfigError(f"duplicate key {full!r}", lineno)
        if value == "":
            raise ConfigError(f"{full}: missing value", lineno)
        name, conv = _KEYS[full]
        try:
            values[name] = conv(_unquote(value, lineno))
        except ValueError as exc:
            raise ConfigError(f"{full}: invalid value {value!r} ({exc})", lineno) from None
        lines[full] = lineno
    cfg = ExperimentConfig(**values)
    _check(cfg, lines)
    return cfg


def load_config(path, strict: bool = True) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), strict=strict)


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % v


def write_csv(path: Path, header, rows) -> None:
    """Write rows with 17-significant-digit floats and ``\\n`` line ends."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def emit_histogram(values, n_bins: int = 50):
    """Equal-width histogram of ``values`` over ``[0, max]``.

    Returns ``(lower, upper, counts)``; an all-zero input uses ``[0, 1]``.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("no values to histogram")
    hi = float(values.max())
    if hi <= 0:
        hi = 1.0
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, hi))
    return edges[:-1], edges[1:], counts


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Report:
    out_dir: Path
    config: ExperimentConfig
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def add_file(self, analysis: str, path: Path):
        self.files.setdefault(analysis, []).append(path)

    def fail(self, analysis: str, message: str):
        self.failures.append(f"{analysis}: {message}")


def _strided(n: int, stride: int, boundary_mask) -> np.ndarray:
    keep = np.zeros(n, dtype=bool)
    keep[::stride] = True
    keep[-1] = True
    keep |= np.asarray(boundary_mask, dtype=bool)
    return np.flatnonzero(keep)


def _run_trajectories(cfg, seq, ens, out, rep):
    rows = []
    finals = []
    norm_dev = 0.0
    energy_dev = 0.0
    for m, w in zip(ens.members, ens.parameters):
        tr = trajectory(ens.r0, seq, m, cfg.n_steps)
        norm_dev = max(norm_dev, float(np.max(np.abs(tr.norms() - 1.0))))
        omegas = sequence_omegas(seq, m)
        phi = np.arctan2(tr.states[:, 1], tr.states[:, 0])
        eta = np.clip(tr.states[:, 2], -1.0, 1.0)
        H = hamiltonian(CanonicalState(phi, eta), omegas[tr.segment_index])
        starts = np.searchsorted(tr.times, seq.boundaries[:-1])
        energy_dev = max(energy_dev, float(np.max(np.abs(H - H[starts[tr.segment_index]]))))
        for i in _strided(tr.times.size, cfg.output_stride, tr.boundary_mask):
            rows.append((m.index, tr.times[i], *tr.states[i], tr.segment_index[i]))
        r_f = tr.states[-1]
        fidelity = 0.5 * (1.0 - float(r_f @ ens.r0))
        finals.append((m.index, w, *r_f, fidelity))
    path = out / "trajectories.csv"
    write_csv(path, ["member", "t", "x", "y", "z", "segment_index"], rows)
    rep.add_file("trajectories", path)
    path = out / "final_states.csv"
    write_csv(path, ["member", "w", "x", "y", "z", "inversion_fidelity"], finals)
    rep.add_file("trajectories", path)
    fid = np.array([f[-1] for f in finals])
    rep.summary["trajectories"] = {
        "max_norm_deviation": norm_dev,
        "max_energy_deviation": energy_dev,
        "fidelity_min": float(fid.min()),
        "fidelity_mean": float(fid.mean()),
        "fidelity_per_member": fid,
    }
    if norm_dev > NORM_TOL:
        rep.fail("trajectories", f"norm deviation {norm_dev:.3g} exceeds {NORM_TOL}")
    if energy_dev > ENERGY_TOL:
        rep.fail("trajectories", f"piecewise energy deviation {energy_dev:.3g} exceeds {ENERGY_TOL}")


def _run_canonical(cfg, seq, ens, out, rep):
    nominal = EnsembleMember(field_scale=cfg.nominal_field, offset=0.0)
    schedule = PiecewiseGenerator.from_sequence(seq, nominal)
    start = CanonicalState(cfg.canonical_phi0_pi * math.pi, cfg.canonical_eta0)
    r0 = canonical_to_cartesian(start.phi, start.eta)
    cart = cartesian_to_canonical(trajectory(r0, seq, nominal, cfg.n_steps))
    phi_dot = hamilton_phi_dot(cart, schedule)
    ok = cart.defined
    sel = select_branch(cart.times[ok], cart.phi[ok], phi_dot[ok], cart.eta[ok],
                        schedule.generators[cart.segment_index[ok]])
    branch = np.zeros(cart.times.size, dtype=int)
    branch[ok] = sel.branch
    summary = {
        "hop_times": sel.hop_times,
        "start_phi": start.phi,
        "start_eta": start.eta,
        "momentum_identity_max_error": float(np.max(np.abs(np.abs(sel.momentum) - np.abs(cart.eta[ok])))),
    }
    try:
        direct = integrate_canonical(start, schedule, cfg.n_steps)
        summary["max_phi_deviation"] = float(np.max(np.abs(direct.phi - cart.phi)))
        summary["max_eta_deviation"] = float(np.max(np.abs(direct.eta - cart.eta)))
    except PoleCrossingError as exc:
        summary["direct_integration_error"] = str(exc)
    rows = [
        (cart.times[i], cart.phi[i], cart.defined[i], cart.eta[i], branch[i])
        for i in _strided(cart.times.size, cfg.output_stride, cart.boundary_mask)
    ]
    path = out / "canonical.csv"
    write_csv(path, ["t", "phi_unwrapped", "phi_defined", "eta", "p_phi_branch"], rows)
    rep.add_file("canonical", path)
    rep.summary["canonical"] = summary


def _bin_of(w, edges):
    k = np.searchsorted(edges, w, side="right") - 1
    return np.clip(k, 0, edges.size - 2)


def _run_stability(cfg, seq, ens, out, rep, threads):
    specs = {
        "phi": SwarmSpec("phi", phi0=cfg.phi0, shift=cfg.delta_phi0, epsilon=cfg.epsilon,
                         scheme=cfg.scheme, t_i_fraction=cfg.t_i, n_tf=cfg.n_tf),
        "eta": SwarmSpec("eta", phi0=cfg.phi0, shift=cfg.delta_eta0, epsilon=cfg.epsilon,
                         scheme=cfg.scheme, t_i_fraction=cfg.t_i, n_tf=cfg.n_tf),
    }
    series = {}
    range_rows = []
    summary = {}
    T = seq.total_duration
    for direction in ("eta", "phi"):
        s = run_swarm(specs[direction], seq, ens, workers=threads)
        series[direction] = s
        avg = average_stability(s, cfg.bins_average)
        member_bin = _bin_of(s.w, avg.edges)
        rows = []
        for k, tf in enumerate(s.t_f):
            for j in range(s.n_members):
                rows.append((tf, s.member_index[j], s.w[j], direction, s.elements[j, k], avg.absolute[member_bin[j], k]))
        path = out / f"stability_{direction}.csv"
        write_csv(path, ["t_f", "member_index", "w", "direction", "element_raw", "element_abs_bin_avg"], rows)
        rep.add_file("stability", path)
        hist_rows = []
        for k, tf in enumerate(s.t_f):
            lo, hi, counts = emit_histogram(avg.absolute[:, k], cfg.bins_histogram)
            hist_rows.extend((tf, a, b, c) for a, b, c in zip(lo, hi, counts))
        path = out / f"histogram_{direction}.csv"
        write_csv(path, ["t_f", "bin_lower", "bin_upper", "count"], hist_rows)
        rep.add_file("stability", path)
        h = range_curve(s)
        range_rows.extend((tf, direction, hv) for tf, hv in zip(s.t_f, h))
        later = s.t_f > s.t_i
        summary[f"h_{direction}"] = {
            "at_end": float(h[-1]),
            "max": float(h.max()),
            "argmax_t_f_over_T": float(s.t_f[int(np.argmax(h))] / T),
            "min_after_t_i": float(h[later].min()),
            "argmin_after_t_i_over_T": float(s.t_f[later][int(np.argmin(h[later]))] / T),
            "argmin_over_half_to_end_over_T": float(
                s.t_f[s.t_f > T / 2][int(np.argmin(h[s.t_f > T / 2]))] / T
            ) if np.any(s.t_f > T / 2) else None,
        }
        if s.t_f[0] == s.t_i and np.any(s.elements[:, 0] != 1.0):
            rep.fail("stability", f"{direction} elements differ from 1 at t_f = t_i")
    path = out / "range.csv"
    write_csv(path, ["t_f", "direction", "h"], range_rows)
    rep.add_file("stability", path)
    M = stability_matrices(series["phi"], series["eta"])
    det = np.linalg.det(M)
    summary["det_max_deviation"] = float(np.max(np.abs(det - 1.0)))
    summary["eta_misalignment_max"] = float(np.max(series["eta"].misalignment))
    if series["eta"].t_f[0] == series["eta"].t_i and np.any(M[:, 0] != np.eye(2)):
        rep.fail("stability", "stability matrix differs from identity at t_f = t_i")
    rep.summary["stability"] = summary


def _run_width(cfg, seq, ens, out, rep):
    ws = width_series(ens, seq, cfg.n_steps)
    idx = _strided(ws.times.size, cfg.output_stride, ws.boundary_mask)
    rows = [(ws.times[i], ws.sigma[i], ws.dsigma2_dt[i], ws.dsigma2_dt_numeric[i], ws.segment_index[i]) for i in idx]
    path = out / "width.csv"
    write_csv(path, ["t", "sigma", "dsigma2_dt_analytic", "dsigma2_dt_numeric", "segment_index"], rows)
    rep.add_file("width", path)
    segs = segment_width_report(ens, seq, series=ws)
    inner = ws.interior
    rep.summary["width"] = {
        "sigma_final": float(ws.sigma[-1]),
        "sigma_max": float(ws.sigma.max()),
        "rate_max_abs_error": float(np.max(np.abs(ws.dsigma2_dt - ws.dsigma2_dt_numeric)[inner])),
        "s1_max_abs": float(ws.s1_max.max()),
        "s23_sum_max_abs": float(np.max(np.abs(ws.s23_sum))),
        "segments": [asdict(s) for s in segs],
    }


def _run_area(cfg, seq, ens, out, rep):
    nominal = EnsembleMember(field_scale=cfg.nominal_field, offset=0.0)
    phi, eta = default_patch(cfg.area_n_points)
    times = np.linspace(0.0, seq.total_duration, cfg.area_n_times)
    areas = patch_area(phi, eta, seq, nominal, times)
    path = out / "area.csv"
    write_csv(path, ["t", "area"], zip(times, areas))
    rep.add_file("area", path)
    rep.summary["area"] = {
        "initial": float(areas[0]),
        "max_relative_deviation": float(np.max(np.abs(areas - math.pi / 2)) / (math.pi / 2)),
    }


def _run_imperfection(cfg, seq, ens, out, rep):
    T = seq.total_duration
    t_i = cfg.t_i * T
    rows = []
    summary = {}
    for label, tf in (("half", T / 2), ("end", T)):
        res = imperfection_measure(ens, seq, tf, t_i=t_i)
        for m, w, Wv, c in zip(ens.members, res.w, res.W, res.consistency):
            rows.append((m.index, w, tf, *Wv, float(np.linalg.norm(Wv)), c))
        summary[f"norm_mean_{label}"] = float(res.norms.mean())
        summary[f"consistency_median_{label}"] = float(np.nanmedian(res.consistency))
    path = out / "imperfection.csv"
    write_csv(path, ["member_index", "w", "t_f", "Wx", "Wy", "Wz", "norm", "consistency_residual"], rows)
    rep.add_file("imperfection", path)
    rep.summary["imperfection"] = summary


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> Report:
    """Run the configured analyses in a fixed order and write the result bundle.

    Invariant violations (norm, piecewise energy, identity at ``t_i``) are
    collected in ``Report.failures`` rather than raised.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = parse_sequence(cfg.sequence, cfg.nominal_field)
    lo, hi, n = cfg.w_range
    ens = make_ensemble(cfg.ensemble_kind, (lo, hi), n, nominal_field=cfg.nominal_field)
    rep = Report(out_dir=out, config=cfg)
    runners = {
        "trajectories": lambda: _run_trajectories(cfg, seq, ens, out, rep),
        "canonical": lambda: _run_canonical(cfg, seq, ens, out, rep),
        "stability": lambda: _run_stability(cfg, seq, ens, out, rep, threads),
        "width": lambda: _run_width(cfg, seq, ens, out, rep),
        "area": lambda: _run_area(cfg, seq, ens, out, rep),
        "imperfection": lambda: _run_imperfection(cfg, seq, ens, out, rep),
    }
    for name in ANALYSES:
        if name in cfg.analyses:
            try:
                runners[name]()
            except (ArithmeticError, ValueError) as exc:
                raise RuntimeError(f"analysis {name!r} failed: {exc}") from exc
    if "json" in cfg.output_formats:
        path = out / "summary.json"
        path.write_text(json.dumps(_jsonable(rep.summary), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        rep.add_file("summary", path)
    if "csv" not in cfg.output_formats:
        for name in list(rep.files):
            for p in rep.files[name]:
                if p.suffix == ".csv":
                    p.unlink()
            rep.files[name] = [p for p in rep.files[name] if p.suffix != ".csv"]
    rep.manifest = {
        "version": __version__,
        "config": _jsonable(cfg.echo()),
        "analyses": [a for a in ANALYSES if a in cfg.analyses],
        "files": {name: {p.name: _sha256(p) for p in rep.files[name]} for name in rep.files},
        "invariant_failures": list(rep.failures),
    }
    (out / "manifest.json").write_text(json.dumps(rep.manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return rep
