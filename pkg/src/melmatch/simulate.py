"""Synthetic targets and error-laden queries.

Targets are random walks over pitch intervals and IOI-bin deltas drawn from
unigram corpus statistics. Queries are sampled from the error model itself:
an initial hidden state from pi, then transitions and emissions, and are
written out as raw notes so they pass through the quantization front end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import (
    DEFAULT_QUANTIZATION,
    QuantizationConfig,
    QuantizedEvent,
    RawNote,
    dequantize_ioi,
    notes_from_records,
    quantize_sequence,
)
from .model import HiddenState, TargetModel, build_target_model, edge_probabilities, initial_edit_probs
from .params import (
    K_OFFSET,
    K_VALUES,
    N_K,
    S_OFFSET,
    S_VALUES,
    ErrorModelParams,
    default_params,
    discrete_normal,
)

INTERVALS = np.arange(-24, 25)
RHYTHM_DELTAS = np.arange(-8, 9)
PITCH_RANGE = (36, 96)


@dataclass(frozen=True)
class CorpusStats:
    pitch_interval_dist: np.ndarray  # over INTERVALS
    rhythm_ratio_dist: np.ndarray  # over RHYTHM_DELTAS
    start_pitch_dist: np.ndarray  # over PITCH_RANGE[0]..PITCH_RANGE[1]
    start_rhythm_dist: np.ndarray  # over bins 0..q-1
    empirical: bool = True

    def __post_init__(self):
        for name in ("pitch_interval_dist", "rhythm_ratio_dist", "start_pitch_dist", "start_rhythm_dist"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability distribution")
            object.__setattr__(self, name, arr)


def _laplace(counts: np.ndarray) -> np.ndarray:
    c = counts + 1.0
    return c / c.sum()


def build_corpus_stats(
    corpus: Sequence[Sequence[RawNote]] | Sequence[str],
    cfg: QuantizationConfig = DEFAULT_QUANTIZATION,
) -> CorpusStats:
    """Add-one smoothed unigram statistics of a corpus of symbolic melodies.

    ``corpus`` holds note sequences or paths to note files.
    """
    seqs = []
    for item in corpus:
        if isinstance(item, (str, bytes)) or hasattr(item, "__fspath__"):
            with open(item) as fh:
                notes, _ = notes_from_records(json.load(fh))
        else:
            notes = list(item)
        seqs.append(notes)
    if not seqs:
        raise ValueError("empty corpus")
    lo, hi = PITCH_RANGE
    iv = np.zeros(len(INTERVALS))
    rd = np.zeros(len(RHYTHM_DELTAS))
    sp = np.zeros(hi - lo + 1)
    sr = np.zeros(cfg.q)
    for notes in seqs:
        if len(notes) < 2:
            raise ValueError("every corpus file needs at least 2 notes")
        ev = quantize_sequence(notes, cfg, offset_search=False)
        pitches = np.array([int(round(n.note_number)) for n in notes])
        bins = np.array([e.rhythm_bin for e in ev])
        np.add.at(iv, np.clip(np.diff(pitches), -24, 24) + 24, 1)
        np.add.at(rd, np.clip(np.diff(bins), -8, 8) + 8, 1)
        sp[np.clip(pitches[0], lo, hi) - lo] += 1
        sr[bins[0]] += 1
    return CorpusStats(_laplace(iv), _laplace(rd), _laplace(sp), _laplace(sr))


def default_corpus_stats(q: int = 29) -> CorpusStats:
    """Hand-specified, non-empirical statistics for use without a corpus.

    Mostly steps and small leaps; rhythms mostly repeat, with doubling and
    halving (4 bins) the common changes.
    """
    iv = np.exp(-np.abs(INTERVALS) / 2.5)
    iv[INTERVALS == 0] *= 0.8
    iv[np.abs(INTERVALS) == 12] += 0.01
    rd = np.full(len(RHYTHM_DELTAS), 0.01)
    rd[RHYTHM_DELTAS == 0] = 0.5
    rd[np.abs(RHYTHM_DELTAS) == 4] = 0.12
    rd[np.abs(RHYTHM_DELTAS) == 2] = 0.05
    rd[np.abs(RHYTHM_DELTAS) == 8] = 0.02
    lo, hi = PITCH_RANGE
    sp = discrete_normal(np.arange(lo, hi + 1), 5.0, 67.0)
    sr = discrete_normal(np.arange(q), 2.0, 17.0)
    return CorpusStats(iv / iv.sum(), rd / rd.sum(), sp, sr, empirical=False)


@dataclass
class SimulationConfig:
    params: ErrorModelParams | None = None
    rng_seed: int = 0
    query_length_range: tuple[int, int] = (8, 12)
    database_size: int = 100
    target_length_range: tuple[int, int] = (20, 40)
    rhythm_band: tuple[int, int] = (10, 22)  # target IOI bins kept within ~170 ms .. 1.4 s
    detune: float = 0.3  # max absolute constant pitch offset of a sung query (semitones)
    pitch_jitter: float = 0.03  # per-note pitch noise sd (semitones)
    ioi_jitter: float = 0.03  # max relative IOI noise, kept inside one bin
    cfg: QuantizationConfig = field(default_factory=QuantizationConfig)


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, stream)])


def _fold(p: int, lo: int, hi: int) -> int:
    while p < lo or p > hi:
        p = 2 * lo - p if p < lo else 2 * hi - p
    return p


def generate_target(stats: CorpusStats, length: int, rng: np.random.Generator, config: SimulationConfig) -> list[RawNote]:
    lo, hi = PITCH_RANGE
    blo, bhi = config.rhythm_band
    pitch = lo + int(rng.choice(len(stats.start_pitch_dist), p=stats.start_pitch_dist))
    rbin = int(np.clip(rng.choice(len(stats.start_rhythm_dist), p=stats.start_rhythm_dist), blo, bhi))
    notes = []
    for k in range(length):
        if k:
            pitch = _fold(pitch + int(rng.choice(INTERVALS, p=stats.pitch_interval_dist)), lo, hi)
            rbin = int(np.clip(rbin + rng.choice(RHYTHM_DELTAS, p=stats.rhythm_ratio_dist), blo, bhi))
        notes.append(RawNote(float(pitch), dequantize_ioi(rbin, config.cfg)))
    return notes


def generate_database(stats: CorpusStats, config: SimulationConfig) -> list[list[RawNote]]:
    """``config.database_size`` symbolic targets; target ``i`` uses seed stream (seed, i)."""
    lo, hi = config.target_length_range
    out = []
    for i in range(config.database_size):
        rng = _rng(config.rng_seed, 0, i)
        out.append(generate_target(stats, int(rng.integers(lo, hi + 1)), rng, config))
    return out


def target_events(notes: Sequence[RawNote], cfg: QuantizationConfig = DEFAULT_QUANTIZATION) -> list[QuantizedEvent]:
    return quantize_sequence(notes, cfg, offset_search=False)


@dataclass
class SampledQuery:
    query: list[QuantizedEvent]
    raw: list[RawNote]
    path: list[HiddenState]
    truncated: bool
    start_index: int


def sample_query(
    target: Sequence[QuantizedEvent] | TargetModel,
    params: ErrorModelParams,
    start_index: int,
    length: int,
    seed,
    force_transposition: int | None = None,
    force_tempo: int | None = None,
    detune: float = 0.0,
    pitch_jitter: float = 0.0,
    ioi_jitter: float = 0.0,
    cfg: QuantizationConfig = DEFAULT_QUANTIZATION,
) -> SampledQuery:
    """Walk the hidden-state model for ``length`` steps and emit a query.

    The walk stops early (``truncated=True``) when it reaches a state without
    successors. Emitted notes are raw (note number, ms) and re-quantized; a
    constant pitch-class shift introduced by detuning is folded into the
    returned path's transpositions.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    m = target if isinstance(target, TargetModel) else build_target_model(target, params.L, params.M, start_index, cfg)
    if m.start_index != start_index:
        m = m.with_start(start_index)
    ctx = params.context_map.assign(m)
    ep = edge_probabilities(params, m, ctx["edit"])
    MS = params.tempo_matrices()
    r = params.q - 1

    pe = initial_edit_probs(params, m, start_index)
    e = int(rng.choice(m.n_edit, p=pe))
    k = K_OFFSET + force_transposition if force_transposition is not None else int(rng.integers(N_K))
    if force_tempo is not None:
        s = S_OFFSET + force_tempo
    else:
        s = int(rng.choice(len(S_VALUES), p=params.initial_tempo()))

    states = []
    pcs: list[int] = []
    iois: list[float] = []
    truncated = False
    while True:
        states.append((e, k, s))
        dp = int(rng.choice(K_VALUES, p=params.pitch_error[ctx["pitch_error"][e]]))
        pcs.append(int((m.expected_pitch[e] + K_VALUES[k] + dp) % 12))
        if m.rhythm_emits[e]:
            dr = int(rng.choice(np.arange(-r, r + 1), p=params.rhythm_error[ctx["rhythm_error"][e]]))
            b = int(np.clip(m.expected_rhythm[e] + S_VALUES[s] + dr, 0, r))
            total = dequantize_ioi(b, cfg)
            n = int(m.agg_len[e])
            if n == 1:
                iois.append(total)
            else:
                # split the chain's duration over its notes; earlier parts are already emitted
                w = rng.dirichlet(np.full(n, 4.0))
                for u in range(n - 1):
                    iois[len(iois) - (n - 1) + u] = total * w[u]
                iois.append(total * w[-1])
        else:
            iois.append(None)  # placeholder until the chain's final state
        if len(states) == length:
            break
        lo, hi = m.succ_ptr[e], m.succ_ptr[e + 1]
        if hi == lo:
            truncated = True
            break
        j = lo + int(rng.choice(hi - lo, p=ep[lo:hi] / ep[lo:hi].sum()))
        e = int(m.succ_idx[j])
        k = (k + int(rng.choice(K_VALUES, p=params.modulation[ctx["modulation"][states[-1][0]]]))) % N_K
        s = int(rng.choice(len(S_VALUES), p=MS[ctx["tempo_change"][states[-1][0]], s]))

    # a query that stops inside an elaboration chain: spread the state's
    # nominal duration over the unfinished notes
    for u, v in enumerate(iois):
        if v is None:
            eu, _, su = states[u]
            b = int(np.clip(m.expected_rhythm[eu] + S_VALUES[su], 0, r))
            iois[u] = dequantize_ioi(b, cfg) / m.order[eu]

    shift = rng.uniform(-detune, detune) if detune > 0 else 0.0
    raw = []
    for pc, ioi in zip(pcs, iois):
        note = 60 + pc + shift + (rng.normal(0.0, pitch_jitter) if pitch_jitter > 0 else 0.0)
        jit = 1.0 + rng.uniform(-ioi_jitter, ioi_jitter) if ioi_jitter > 0 else 1.0
        raw.append(RawNote(float(note), float(ioi * jit)))
    query = quantize_sequence(raw, cfg)

    got = np.array([ev.pitch_class for ev in query])
    delta = (got - np.array(pcs)) % 12
    c = int(delta[0]) if np.all(delta == delta[0]) else 0
    path = [
        HiddenState(m.edit_states[eu], int((K_VALUES[ku] + c + 5) % 12 - 5), int(S_VALUES[su]))
        for eu, ku, su in states
    ]
    return SampledQuery(query=query, raw=raw, path=path, truncated=truncated, start_index=start_index)


def moderate_error_params(base: ErrorModelParams | None = None, local_only: bool = False) -> ErrorModelParams:
    """Generating parameters with moderate error.

    ``local_only`` puts (nearly) all error in per-note pitch/rhythm deviations.
    """
    base = base or default_params()
    q = base.q
    pe = np.zeros(12)
    pe[K_OFFSET] = 0.8
    pe[K_OFFSET - 1] = pe[K_OFFSET + 1] = 0.08
    pe[K_OFFSET - 2] = pe[K_OFFSET + 2] = 0.02
    re = np.zeros(2 * q - 1)
    re[q - 1] = 0.7
    re[q - 2] = re[q] = 0.12
    re[q - 3] = re[q + 1] = 0.03
    mod = np.zeros(12)
    tc = np.zeros(9)
    if local_only:
        mod[K_OFFSET] = 0.98
        mod[K_OFFSET - 1] = mod[K_OFFSET + 1] = 0.01
        tc[S_OFFSET] = 0.98
        tc[S_OFFSET - 1] = tc[S_OFFSET + 1] = 0.01
    else:
        mod[K_OFFSET] = 0.9
        mod[K_OFFSET - 1] = mod[K_OFFSET + 1] = 0.05
        tc[S_OFFSET] = 0.9
        tc[S_OFFSET - 1] = tc[S_OFFSET + 1] = 0.05
    n_cls = base.n_edit_classes
    edit = np.full(n_cls, 0.1 / max(n_cls - 1, 1))
    edit[0] = 0.9 if n_cls > 1 else 1.0
    return base.replace(edit=edit, modulation=mod, tempo_change=tc, pitch_error=pe, rhythm_error=re)


def sample_queries(
    targets: Sequence[Sequence[QuantizedEvent]],
    params: ErrorModelParams,
    n: int,
    config: SimulationConfig,
    target_ids: Sequence[int] | None = None,
) -> list[tuple[int, SampledQuery]]:
    """``n`` queries, each from a random target and start; query ``j`` uses seed stream (seed, 1, j)."""
    lo, hi = config.query_length_range
    out = []
    for j in range(n):
        rng = _rng(config.rng_seed, 1, j)
        tid = int(target_ids[j]) if target_ids is not None else int(rng.integers(len(targets)))
        tgt = targets[tid]
        length = int(rng.integers(lo, hi + 1))
        # leave room for the query inside the target
        start = int(rng.integers(1, max(1, len(tgt) - length) + 1))
        sq = sample_query(
            tgt, params, start, length, rng,
            detune=config.detune, pitch_jitter=config.pitch_jitter, ioi_jitter=config.ioi_jitter, cfg=config.cfg,
        )
        out.append((tid, sq))
    return out
