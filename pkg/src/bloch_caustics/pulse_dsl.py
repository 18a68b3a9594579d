"""Composite-pulse notation: parsing, formatting and segment timing.

A sequence is written the way NMR people write it, e.g. ``90(x)180(y)90(x)``:
each token is a flip angle in degrees followed by the phase of the rotation
axis in parentheses. Named axes are ``x``, ``y``, ``-x`` and ``-y``; any
other phase can be given numerically in degrees, ``90(45)``.

Grammar::

    sequence := segment+
    segment  := NUMBER "(" AXIS ")"
    AXIS     := "x" | "y" | "-x" | "-y" | NUMBER

Angles are stored in radians. Flip angle, not clock time, is the primary
extent of a segment; clock times follow from the nominal field.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PulseSegment",
    "PulseSequence",
    "PulseSyntaxError",
    "SequenceError",
    "SequenceTiming",
    "parse_sequence",
    "format_sequence",
    "segment_clock_time",
    "validate",
    "LEVITT",
]

LEVITT = "90(x)180(y)90(x)"

_NAMED_AXES = {
    "x": 0.0,
    "y": math.pi / 2,
    "-x": math.pi,
    "-y": 3 * math.pi / 2,
}
_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TOKEN = re.compile(r"\s*(?P<angle>[^()\s]+)\s*\(\s*(?P<axis>[^()]*?)\s*\)\s*")
_NUMBER_RE = re.compile(rf"^{_NUMBER}$")


class PulseSyntaxError(ValueError):
    """Malformed pulse notation.

    ``token`` is the 1-based index of the offending segment token and
    ``column`` the 0-based character offset where it starts.
    """

    def __init__(self, message: str, token: int, column: int):
        super().__init__(f"token {token} (column {column}): {message}")
        self.token = token
        self.column = column


class SequenceError(ValueError):
    """A sequence violates a structural invariant; ``index`` is the segment (0-based) or None."""

    def __init__(self, message: str, index: int | None = None):
        prefix = f"segment {index}: " if index is not None else ""
        super().__init__(prefix + message)
        self.index = index


@dataclass(frozen=True)
class PulseSegment:
    """One rectangular rotating-frame pulse.

    Attributes
    ----------
    nominal_flip : float
        Flip angle in radians for the nominal field.
    axis_phase : float
        Azimuth of the rotation axis in radians (x -> 0, y -> pi/2).
    axis_polar : float
        Polar angle of the rotation axis; pi/2 puts it on the equator.
    amplitude_scale : float
        Field amplitude relative to the nominal field.
    """

    nominal_flip: float
    axis_phase: float = 0.0
    axis_polar: float = math.pi / 2
    amplitude_scale: float = 1.0

    @property
    def axis(self) -> np.ndarray:
        if self.axis_polar == math.pi / 2:
            # exact zeros on the equator; cos(pi/2) is 6e-17 in floating point
            st, ct = 1.0, 0.0
        else:
            st, ct = math.sin(self.axis_polar), math.cos(self.axis_polar)
        # exact components for the four named axes
        phase = self.axis_phase
        if phase in _NAMED_AXES.values():
            c, s = {0.0: (1.0, 0.0), math.pi / 2: (0.0, 1.0), math.pi: (-1.0, 0.0), 3 * math.pi / 2: (0.0, -1.0)}[phase]
        else:
            c, s = math.cos(phase), math.sin(phase)
        return np.array([st * c, st * s, ct])


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[PulseSegment, ...]
    nominal_field: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    @property
    def period(self) -> float:
        """Nominal Rabi period ``2*pi / nominal_field``."""
        return 2 * math.pi / self.nominal_field

    @property
    def clock_times(self) -> np.ndarray:
        return np.array([segment_clock_time(s, self) for s in self.segments], dtype=float)

    @property
    def boundaries(self) -> np.ndarray:
        """Cumulative clock times, starting at 0 and ending at the total duration."""
        return np.concatenate([[0.0], np.cumsum(self.clock_times)])

    @property
    def total_duration(self) -> float:
        return float(self.boundaries[-1])


@dataclass(frozen=True)
class SequenceTiming:
    total_duration: float
    boundaries: np.ndarray = field(repr=False)
    clock_times: np.ndarray = field(repr=False)
    fractional_durations: np.ndarray = field(repr=False)


def segment_clock_time(segment: PulseSegment, sequence: PulseSequence) -> float:
    """Clock time of a segment, ``flip / (amplitude_scale * nominal_field)``."""
    return segment.nominal_flip / (segment.amplitude_scale * sequence.nominal_field)


def validate(sequence: PulseSequence) -> SequenceTiming:
    """Check the sequence invariants and return its timing.

    Raises
    ------
    SequenceError
        If the sequence is empty or a segment has a non-positive flip angle,
        an axis polar angle outside [0, pi], or a non-positive amplitude.
    """
    if len(sequence.segments) == 0:
        raise SequenceError("sequence has no segments")
    if not (sequence.nominal_field > 0 and math.isfinite(sequence.nominal_field)):
        raise SequenceError(f"nominal field must be positive, got {sequence.nominal_field}")
    for k, seg in enumerate(sequence.segments):
        if not (seg.nominal_flip > 0 and math.isfinite(seg.nominal_flip)):
            raise SequenceError(f"flip angle must be positive, got {seg.nominal_flip}", k)
        if not (0.0 <= seg.axis_polar <= math.pi):
            raise SequenceError(f"axis polar angle {seg.axis_polar} outside [0, pi]", k)
        if not (seg.amplitude_scale > 0 and math.isfinite(seg.amplitude_scale)):
            raise SequenceError(f"amplitude scale must be positive, got {seg.amplitude_scale}", k)
    bounds = sequence.boundaries
    if np.any(np.diff(bounds) <= 0):
        k = int(np.argmax(np.diff(bounds) <= 0))
        raise SequenceError("segment boundaries are not strictly increasing", k)
    clock = sequence.clock_times
    return SequenceTiming(
        total_duration=float(bounds[-1]),
        boundaries=bounds,
        clock_times=clock,
        fractional_durations=clock / sequence.period,
    )


def parse_sequence(text: str, nominal_field: float = 1.0) -> PulseSequence:
    """Parse composite-pulse notation into a validated :class:`PulseSequence`.

    Segments are returned in temporal order (leftmost first).

    >>> seq = parse_sequence("90(x)180(y)90(x)")
    >>> [round(s.nominal_flip, 6) for s in seq]
    [1.570796, 3.141593, 1.570796]
    """
    if not text or not text.strip():
        raise PulseSyntaxError("empty pulse sequence", token=1, column=0)
    segments = []
    pos = 0
    token = 0
    while pos < len(text):
        if not text[pos:].strip():
            break
        token += 1
        column = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
        m = _TOKEN.match(text, pos)
        if m is None:
            raise PulseSyntaxError(f"expected '<degrees>(<axis>)' near {text[column:column + 12]!r}", token, column)
        angle_txt, axis_txt = m.group("angle"), m.group("axis")
        if not _NUMBER_RE.match(angle_txt):
            raise PulseSyntaxError(f"flip angle {angle_txt!r} is not a number", token, column)
        degrees = float(angle_txt)
        if not (degrees > 0 and math.isfinite(degrees)):
            raise PulseSyntaxError(f"flip angle must be positive, got {angle_txt}", token, column)
        axis_key = axis_txt.replace(" ", "").lower()
        if axis_key in _NAMED_AXES:
            phase = _NAMED_AXES[axis_key]
        elif _NUMBER_RE.match(axis_key):
            phase_deg = math.fmod(float(axis_key), 360.0)
            if phase_deg < 0:
                phase_deg += 360.0
            phase = math.radians(phase_deg)
        else:
            raise PulseSyntaxError(f"unknown axis {axis_txt!r}", token, column)
        segments.append(PulseSegment(nominal_flip=math.radians(degrees), axis_phase=phase))
        pos = m.end()
    sequence = PulseSequence(tuple(segments), nominal_field=nominal_field)
    validate(sequence)
    return sequence


def _degrees_for(radians: float) -> float:
    # Smallest-change decimal degrees whose radian conversion is bit-identical,
    # so that format/parse round-trips exactly.
    d = math.degrees(radians)
    if math.radians(d) == radians:
        return d
    lo = hi = d
    for _ in range(8):
        lo, hi = math.nextafter(lo, -math.inf), math.nextafter(hi, math.inf)
        for cand in (lo, hi):
            if math.radians(cand) == radians:
                return cand
    return d


def _format_number(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def format_sequence(sequence: PulseSequence) -> str:
    """Render a sequence back to notation; ``parse_sequence`` inverts it."""
    names = {v: k for k, v in _NAMED_AXES.items()}
    parts = []
    for seg in sequence.segments:
        axis = names.get(seg.axis_phase)
        if axis is None:
            axis = _format_number(_degrees_for(seg.axis_phase))
        parts.append(f"{_format_number(_degrees_for(seg.nominal_flip))}({axis})")
    return "".join(parts)
