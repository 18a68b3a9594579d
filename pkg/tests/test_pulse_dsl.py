from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bloch_caustics.pulse_dsl import (
    LEVITT,
    PulseSegment,
    PulseSequence,
    PulseSyntaxError,
    SequenceError,
    format_sequence,
    parse_sequence,
    segment_clock_time,
    validate,
)


class TestParse:
    def test_levitt(self):
        seq = parse_sequence(LEVITT)
        assert len(seq) == 3
        np.testing.assert_allclose([s.nominal_flip for s in seq], [math.pi / 2, math.pi, math.pi / 2])
        assert [s.axis_phase for s in seq] == [0.0, math.pi / 2, 0.0]
        assert all(s.axis_polar == math.pi / 2 for s in seq)

    def test_single_token(self):
        (seg,) = parse_sequence("180(y)").segments
        assert seg.nominal_flip == pytest.approx(math.pi)
        assert seg.axis_phase == math.pi / 2

    @pytest.mark.parametrize("axis,phase", [("x", 0.0), ("y", math.pi / 2), ("-x", math.pi), ("-y", 1.5 * math.pi)])
    def test_named_axes(self, axis, phase):
        (seg,) = parse_sequence(f"90({axis})").segments
        assert seg.axis_phase == phase

    def test_explicit_phase(self):
        (seg,) = parse_sequence("90(45)").segments
        assert seg.axis_phase == pytest.approx(math.pi / 4)
        (seg,) = parse_sequence("90(-90)").segments
        assert seg.axis_phase == pytest.approx(1.5 * math.pi)

    def test_whitespace_tolerant(self):
        a = parse_sequence(LEVITT)
        b = parse_sequence("  90 ( x )  180(y)\t90(x) ")
        assert a.segments == b.segments

    def test_bad_axis_reports_token(self):
        with pytest.raises(PulseSyntaxError) as exc:
            parse_sequence("90(w)")
        assert exc.value.token == 1

    def test_bad_axis_later_token(self):
        with pytest.raises(PulseSyntaxError) as exc:
            parse_sequence("90(x)180(q)")
        assert exc.value.token == 2
        assert exc.value.column == 5

    @pytest.mark.parametrize("text", ["", "   ", "-90(x)", "0(x)", "abc(x)", "90x", "90(x"])
    def test_rejects(self, text):
        with pytest.raises(PulseSyntaxError):
            parse_sequence(text)


def test_clock_times():
    seq = parse_sequence(LEVITT)
    T = seq.total_duration
    assert segment_clock_time(seq.segments[0], seq) == pytest.approx(math.pi / 2)
    assert segment_clock_time(seq.segments[0], seq) == pytest.approx(T / 4)
    assert segment_clock_time(seq.segments[1], seq) == pytest.approx(T / 2)
    fast = parse_sequence(LEVITT, nominal_field=2.0)
    assert segment_clock_time(fast.segments[0], fast) == pytest.approx(math.pi / 4)


class TestValidate:
    def test_levitt_boundaries(self):
        timing = validate(parse_sequence(LEVITT))
        T = timing.total_duration
        np.testing.assert_allclose(timing.boundaries, [0, T / 4, 3 * T / 4, T])
        assert T == pytest.approx(2 * math.pi)
        np.testing.assert_allclose(timing.fractional_durations, [0.25, 0.5, 0.25])

    def test_empty(self):
        with pytest.raises(SequenceError):
            validate(PulseSequence(()))

    def test_negative_flip(self):
        seq = PulseSequence((PulseSegment(math.pi / 2), PulseSegment(-math.pi / 2)))
        with pytest.raises(SequenceError) as exc:
            validate(seq)
        assert exc.value.index == 1

    def test_bad_amplitude(self):
        with pytest.raises(SequenceError):
            validate(PulseSequence((PulseSegment(1.0, amplitude_scale=0.0),)))


def test_axis_components_exact():
    for text, expected in [("90(x)", (1, 0, 0)), ("90(y)", (0, 1, 0)), ("90(-x)", (-1, 0, 0)), ("90(-y)", (0, -1, 0))]:
        (seg,) = parse_sequence(text).segments
        assert tuple(seg.axis) == expected


def test_levitt_round_trip():
    seq = parse_sequence(LEVITT)
    assert format_sequence(seq) == LEVITT
    assert parse_sequence(format_sequence(seq)).segments == seq.segments


_token = st.tuples(
    st.floats(min_value=0.5, max_value=720.0, allow_nan=False),
    st.one_of(st.sampled_from(["x", "y", "-x", "-y"]), st.floats(min_value=0.0, max_value=359.0).map(lambda d: repr(d))),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(_token, min_size=1, max_size=6))
def test_round_trip_property(tokens):
    text = "".join(f"{a!r}({ax})" for a, ax in tokens)
    seq = parse_sequence(text)
    again = parse_sequence(format_sequence(seq))
    assert again.segments == seq.segments


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=1.0, max_value=360.0), min_size=1, max_size=8))
def test_boundaries_increase_to_total(flips):
    seq = parse_sequence("".join(f"{f!r}(x)" for f in flips))
    b = seq.boundaries
    assert b[0] == 0.0
    assert np.all(np.diff(b) > 0)
    assert b[-1] == seq.total_duration
