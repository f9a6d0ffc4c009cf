import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melmatch.events import (
    OFFSETS,
    QuantizationConfig,
    RawNote,
    aggregate_bin,
    dequantize_ioi,
    frequency_to_note,
    load_events,
    notes_from_records,
    notes_to_records,
    pitch_class,
    quantize_ioi,
    quantize_sequence,
    select_offset,
)


def offset_oracle(notes):
    """Exhaustive search written independently: exact decimal offsets, round-half-up."""
    errs = []
    for k in range(10):
        o = k / 10
        e = sum((m + o - math.floor(m + o + 0.5)) ** 2 for m in notes) / len(notes)
        errs.append(e)
    return errs


class TestSelectOffset:
    def test_worked_example(self):
        o, rounded = select_offset([48.4, 46.6, 44.4, 43.6])
        assert o == 0.5
        assert rounded == [49, 47, 45, 44]

    def test_integers_need_no_offset(self):
        assert select_offset([60.0, 62.0]) == (0.0, [60, 62])

    def test_near_integer_example_against_exhaustive_search(self):
        notes = [59.95, 61.95, 63.95]
        errs = offset_oracle(notes)
        o, rounded = select_offset(notes)
        assert errs[round(o * 10)] <= min(errs) + 1e-12
        assert rounded == [math.floor(m + o + 0.5) for m in notes]

    def test_empty(self):
        with pytest.raises(ValueError, match="empty sequence"):
            select_offset([])

    def test_ties_take_smallest_offset(self):
        # a lone note at x.5: offsets 0.0 and ... give equal error pairs; smallest wins
        o, _ = select_offset([60.25])
        errs = offset_oracle([60.25])
        best = min(errs)
        first = next(k for k, e in enumerate(errs) if e <= best + 1e-12)
        assert o == OFFSETS[first]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(30, 100, allow_nan=False), min_size=1, max_size=12))
    def test_optimal_over_all_offsets(self, notes):
        o, rounded = select_offset(notes)
        errs = offset_oracle(notes)
        assert errs[round(o * 10)] <= min(errs) + 1e-9
        assert all(abs(r - (m + o)) <= 0.5 + 1e-9 for r, m in zip(rounded, notes))


class TestPitchClass:
    @pytest.mark.parametrize("n,pc", [(70, 10), (60, 0), (-3, 9), (11, 11), (12, 0)])
    def test_examples(self, n, pc):
        assert pitch_class(n) == pc

    @given(st.integers(-500, 500), st.integers(-20, 20))
    def test_octave_invariance(self, x, k):
        assert 0 <= pitch_class(x) <= 11
        assert pitch_class(x + 12 * k) == pitch_class(x)


class TestQuantizeIoi:
    @pytest.mark.parametrize("ms,b", [(30, 0), (3840, 28), (60, 4), (120, 8), (10, 0), (10000, 28)])
    def test_examples(self, ms, b):
        assert quantize_ioi(ms) == b

    @pytest.mark.parametrize("bad", [0, -5.0])
    def test_non_positive(self, bad):
        with pytest.raises(ValueError, match="non-positive IOI"):
            quantize_ioi(bad)

    def test_dequantize_centers(self):
        assert dequantize_ioi(0) == pytest.approx(30.0)
        assert dequantize_ioi(28) == pytest.approx(3840.0)
        assert dequantize_ioi(4) == pytest.approx(60.0)
        # analytic inverse: 30 * 2^(b/4)
        for b in range(29):
            assert dequantize_ioi(b) == pytest.approx(30.0 * 2 ** (b / 4))
            assert quantize_ioi(dequantize_ioi(b)) == b

    @pytest.mark.parametrize("bad", [-1, 29])
    def test_dequantize_range(self, bad):
        with pytest.raises(ValueError):
            dequantize_ioi(bad)

    def test_doubling_law(self):
        for b in range(0, 25):
            assert quantize_ioi(2 * dequantize_ioi(b)) == b + 4

    @given(st.floats(1, 20000), st.floats(1, 20000))
    def test_monotone(self, a, b):
        a, b = min(a, b), max(a, b)
        assert quantize_ioi(a) <= quantize_ioi(b)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            QuantizationConfig(q=1)
        with pytest.raises(ValueError):
            QuantizationConfig(ioi_min_ms=100, ioi_max_ms=50)

    def test_aggregate_sums_in_milliseconds(self):
        # two 60 ms notes are one 120 ms event (bin 8), not bin 4 + bin 4
        assert aggregate_bin([60.0, 60.0]) == 8


class TestQuantizeSequence:
    def test_single_note(self):
        (ev,) = quantize_sequence([RawNote(60.0, 500.0)])
        assert ev.pitch_class == 0
        assert ev.rhythm_bin == quantize_ioi(500.0)
        assert ev.raw_ioi_ms == 500.0

    def test_worked_example_goes_through_offset(self):
        notes = [RawNote(m, 250.0) for m in (48.4, 46.6, 44.4, 43.6)]
        assert [e.pitch_class for e in quantize_sequence(notes)] == [49 % 12, 47 % 12, 45 % 12, 44 % 12]

    def test_raw_note_rejects_bad_ioi(self):
        with pytest.raises(ValueError, match="non-positive IOI"):
            RawNote(60.0, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(30, 100), st.floats(5, 6000)), min_size=1, max_size=10))
    def test_elementwise_composition(self, pairs):
        notes = [RawNote(m, d) for m, d in pairs]
        evs = quantize_sequence(notes)
        o, rounded = select_offset([m for m, _ in pairs])
        for ev, r, (m, d) in zip(evs, rounded, pairs):
            assert ev.pitch_class == r % 12
            assert ev.rhythm_bin == quantize_ioi(d)
            assert ev.raw_ioi_ms == d

    def test_symbolic_skips_offset(self):
        notes = [RawNote(61.0, 200.0), RawNote(62.0, 200.0)]
        assert [e.pitch_class for e in quantize_sequence(notes, offset_search=False)] == [1, 2]


def test_frequency_to_note():
    assert frequency_to_note(440.0) == pytest.approx(69.0)
    assert frequency_to_note(880.0) == pytest.approx(81.0)
    with pytest.raises(ValueError):
        frequency_to_note(0.0)


class TestFiles:
    def test_sung_and_symbolic_records(self, tmp_path):
        sung = [{"note": 60.3, "ioi_ms": 400}, {"note": 62.3, "ioi_ms": 200}]
        sym = [{"pitch": 61, "ioi_ms": 400}]
        assert notes_from_records(sung)[1] is False
        assert notes_from_records(sym)[1] is True
        p = tmp_path / "q.json"
        p.write_text(json.dumps(sung))
        # offset 0.7 lifts 60.3 to 61
        assert [e.pitch_class for e in load_events(p)] == [1, 3]

    @pytest.mark.parametrize(
        "records",
        [[], [{"note": 60}], [{"ioi_ms": 5}], [{"pitch": 60.5, "ioi_ms": 5}], [{"pitch": 60, "ioi_ms": 5}, {"note": 1, "ioi_ms": 5}]],
    )
    def test_bad_records(self, records):
        with pytest.raises(ValueError):
            notes_from_records(records)

    def test_round_trip(self):
        notes = [RawNote(60.0, 100.0), RawNote(67.0, 300.0)]
        back, symbolic = notes_from_records(notes_to_records(notes, True))
        assert symbolic and back == notes
        assert np.all([n.ioi_ms > 0 for n in back])
