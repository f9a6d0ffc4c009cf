"""Note events and their quantized pitch-class / IOI-bin representation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

OFFSETS = tuple(round(0.1 * k, 1) for k in range(10))


@dataclass(frozen=True)
class RawNote:
    note_number: float
    ioi_ms: float

    def __post_init__(self):
        if not self.ioi_ms > 0:
            raise ValueError(f"non-positive IOI: {self.ioi_ms}")


@dataclass(frozen=True)
class QuantizedEvent:
    pitch_class: int
    rhythm_bin: int
    raw_ioi_ms: float


@dataclass(frozen=True)
class QuantizationConfig:
    """Logarithmic IOI binning. ``ioi_min_ms``/``ioi_max_ms`` are bin centers."""

    q: int = 29
    ioi_min_ms: float = 30.0
    ioi_max_ms: float = 3840.0

    def __post_init__(self):
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if not 0 < self.ioi_min_ms < self.ioi_max_ms:
            raise ValueError("need 0 < ioi_min_ms < ioi_max_ms")

    @property
    def bins_per_log_unit(self) -> float:
        return (self.q - 1) / (math.log(self.ioi_max_ms) - math.log(self.ioi_min_ms))


DEFAULT_QUANTIZATION = QuantizationConfig()


def frequency_to_note(freq_hz: float) -> float:
    """Equal-tempered floating-point MIDI note number (A440 -> 69)."""
    if freq_hz <= 0:
        raise ValueError("frequency must be positive")
    return 69.0 + 12.0 * math.log2(freq_hz / 440.0)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(int)


def select_offset(notes: Sequence[float]) -> tuple[float, list[int]]:
    """Pick the offset in {0.0, ..., 0.9} minimizing mean squared rounding error.

    Ties go to the smallest offset. Returns ``(offset, rounded_notes)``.
    """
    m = np.asarray(notes, dtype=float)
    if m.size == 0:
        raise ValueError("empty sequence")
    best_o, best_e = 0.0, math.inf
    for o in OFFSETS:
        shifted = m + o
        err = float(np.mean((shifted - _round_half_up(shifted)) ** 2))
        # 1e-12 slack keeps decimal offsets like 0.1 from losing exact ties
        if err < best_e - 1e-12:
            best_o, best_e = o, err
    return best_o, [int(v) for v in _round_half_up(m + best_o)]


def pitch_class(note_number: int) -> int:
    return int(note_number) % 12


def quantize_ioi(ioi_ms: float, cfg: QuantizationConfig = DEFAULT_QUANTIZATION) -> int:
    if not ioi_ms > 0:
        raise ValueError(f"non-positive IOI: {ioi_ms}")
    x = (math.log(ioi_ms) - math.log(cfg.ioi_min_ms)) * cfg.bins_per_log_unit
    return int(min(max(math.floor(x + 0.5), 0), cfg.q - 1))


def dequantize_ioi(rhythm_bin: int, cfg: QuantizationConfig = DEFAULT_QUANTIZATION) -> float:
    """Bin-center IOI in milliseconds."""
    if not 0 <= rhythm_bin <= cfg.q - 1:
        raise ValueError(f"rhythm bin {rhythm_bin} outside [0, {cfg.q - 1}]")
    return cfg.ioi_min_ms * math.exp(rhythm_bin / cfg.bins_per_log_unit)


def quantize_sequence(
    notes: Iterable[RawNote],
    cfg: QuantizationConfig = DEFAULT_QUANTIZATION,
    offset_search: bool = True,
) -> list[QuantizedEvent]:
    """Quantize a note sequence.

    Queries go through the offset search; symbolic targets should pass
    ``offset_search=False`` so their (integer) note numbers are used as-is.
    """
    notes = list(notes)
    if not notes:
        return []
    if offset_search:
        _, rounded = select_offset([n.note_number for n in notes])
    else:
        rounded = [int(v) for v in _round_half_up([n.note_number for n in notes])]
    return [
        QuantizedEvent(pitch_class(p), quantize_ioi(n.ioi_ms, cfg), float(n.ioi_ms))
        for p, n in zip(rounded, notes)
    ]


def aggregate_bin(iois_ms: Iterable[float], cfg: QuantizationConfig = DEFAULT_QUANTIZATION) -> int:
    """Quantize the summed duration of several events (durations add in ms, not in bins)."""
    return quantize_ioi(float(sum(iois_ms)), cfg)


# -- file I/O ---------------------------------------------------------------


def notes_from_records(records: list[dict]) -> tuple[list[RawNote], bool]:
    """Parse note records; returns the notes and whether they are symbolic.

    Records are ``{"note": float, "ioi_ms": float}`` (sung, offset search applies)
    or ``{"pitch": int, "ioi_ms": float}`` (symbolic target).
    """
    if not isinstance(records, list) or not records:
        raise ValueError("note file must be a non-empty JSON array")
    notes = []
    symbolic = None
    for k, rec in enumerate(records):
        if not isinstance(rec, dict) or "ioi_ms" not in rec:
            raise ValueError(f"record {k}: expected an object with 'ioi_ms'")
        if "pitch" in rec:
            is_sym = True
            value = rec["pitch"]
            if int(value) != value:
                raise ValueError(f"record {k}: symbolic pitch must be an integer")
        elif "note" in rec:
            is_sym = False
            value = rec["note"]
        else:
            raise ValueError(f"record {k}: needs 'note' or 'pitch'")
        if symbolic is None:
            symbolic = is_sym
        elif symbolic != is_sym:
            raise ValueError("note file mixes 'note' and 'pitch' records")
        notes.append(RawNote(float(value), float(rec["ioi_ms"])))
    return notes, bool(symbolic)


def load_events(path, cfg: QuantizationConfig = DEFAULT_QUANTIZATION) -> list[QuantizedEvent]:
    with open(path) as fh:
        notes, symbolic = notes_from_records(json.load(fh))
    return quantize_sequence(notes, cfg, offset_search=not symbolic)


def notes_to_records(notes: Iterable[RawNote], symbolic: bool) -> list[dict]:
    key = "pitch" if symbolic else "note"
    out = []
    for n in notes:
        value = int(n.note_number) if symbolic else float(n.note_number)
        out.append({key: value, "ioi_ms": float(n.ioi_ms)})
    return out
