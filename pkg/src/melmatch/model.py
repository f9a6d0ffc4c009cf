"""Target models: hidden-state topology over edit type x transposition x tempo.

Edit states are enumerated per target position ``i`` (1-based) in the order
``Same_i, Join_i^2..Join_i^L, Elab_{i,1}^2..Elab_{i,2}^2, ..., Elab_{i,M}^M``.
A hidden state is an edit state paired with a transposition index (12) and a
tempo index (9); flat index ``x = e * 108 + k * 9 + s``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .events import DEFAULT_QUANTIZATION, QuantizationConfig, QuantizedEvent, aggregate_bin
from .params import (
    K_OFFSET,
    K_VALUES,
    N_K,
    N_S,
    S_OFFSET,
    S_VALUES,
    ErrorModelParams,
    wrap_pitch,
)

N_CLUSTER = N_K * N_S


class EditKind(IntEnum):
    SAME = 0
    JOIN = 1
    ELAB = 2


@dataclass(frozen=True)
class EditType:
    kind: EditKind
    target_index: int
    order: int = 1
    elab_position: int = 1

    def __post_init__(self):
        # Join^1 and Elab^1_1 are the same thing as Same
        if self.order == 1 and self.kind != EditKind.SAME:
            object.__setattr__(self, "kind", EditKind.SAME)
            object.__setattr__(self, "elab_position", 1)

    def __str__(self):
        if self.kind == EditKind.SAME:
            return f"Same_{self.target_index}"
        if self.kind == EditKind.JOIN:
            return f"Join_{self.target_index}^{self.order}"
        return f"Elab_{self.target_index},{self.elab_position}^{self.order}"


@dataclass(frozen=True)
class HiddenState:
    edit: EditType
    transposition: int
    tempo: int

    def __post_init__(self):
        if not -5 <= self.transposition <= 6:
            raise ValueError("transposition outside -5..+6")
        if not -4 <= self.tempo <= 4:
            raise ValueError("tempo outside -4..+4")


@dataclass(frozen=True, eq=False)
class TargetModel:
    target: tuple[QuantizedEvent, ...]
    L: int
    M: int
    start_index: int
    edit_states: tuple[EditType, ...]
    # per edit state arrays
    pos: np.ndarray  # 1-based target index
    kind: np.ndarray
    order: np.ndarray
    elab_j: np.ndarray
    edit_class: np.ndarray  # destination classification, -1 inside an Elab chain
    expected_pitch: np.ndarray
    expected_rhythm: np.ndarray
    rhythm_emits: np.ndarray  # False for non-final Elab states
    agg_len: np.ndarray  # number of query notes aggregated for the rhythm comparison
    succ_ptr: np.ndarray
    succ_idx: np.ndarray

    @property
    def n_edit(self) -> int:
        return len(self.edit_states)

    @property
    def n_states(self) -> int:
        return self.n_edit * N_CLUSTER

    @property
    def target_length(self) -> int:
        return len(self.target)

    def successors(self, e: int) -> np.ndarray:
        return self.succ_idx[self.succ_ptr[e] : self.succ_ptr[e + 1]]

    def entry_states(self, i: int) -> np.ndarray:
        """Edit states that can begin at target position ``i`` (classification >= 0)."""
        return np.flatnonzero((self.pos == i) & (self.edit_class >= 0))

    def edit_index(self, edit: EditType) -> int:
        return self._index()[edit]

    def _index(self) -> dict:
        cache = self.__dict__.get("_edit_lookup")
        if cache is None:
            cache = {et: k for k, et in enumerate(self.edit_states)}
            object.__setattr__(self, "_edit_lookup", cache)
        return cache

    def with_start(self, start_index: int) -> "TargetModel":
        if not 1 <= start_index <= self.target_length:
            raise ValueError(f"start_index {start_index} out of range 1..{self.target_length}")
        return replace(self, start_index=start_index)

    def state(self, x: int) -> HiddenState:
        e, c = divmod(int(x), N_CLUSTER)
        k, s = divmod(c, N_S)
        return HiddenState(self.edit_states[e], int(K_VALUES[k]), int(S_VALUES[s]))

    def state_index(self, state: HiddenState) -> int:
        e = self.edit_index(state.edit)
        return e * N_CLUSTER + (state.transposition + K_OFFSET) * N_S + state.tempo + S_OFFSET


def build_target_model(
    target: Sequence[QuantizedEvent],
    L: int = 2,
    M: int = 2,
    start_index: int = 1,
    cfg: QuantizationConfig = DEFAULT_QUANTIZATION,
) -> TargetModel:
    target = tuple(target)
    n = len(target)
    if n == 0:
        raise ValueError("empty target")
    if L < 1 or M < 1:
        raise ValueError("L and M must be >= 1")
    if not 1 <= start_index <= n:
        raise ValueError(f"start_index {start_index} out of range 1..{n}")

    states: list[EditType] = []
    cls: list[int] = []
    exp_r: list[int] = []
    for i in range(1, n + 1):
        ev = target[i - 1]
        states.append(EditType(EditKind.SAME, i))
        cls.append(0)
        exp_r.append(ev.rhythm_bin)
        for l in range(2, L + 1):
            if i + l - 1 <= n:
                states.append(EditType(EditKind.JOIN, i, l))
                cls.append(l - 1)
                exp_r.append(aggregate_bin([target[j].raw_ioi_ms for j in range(i - 1, i + l - 1)], cfg))
        for m in range(2, M + 1):
            for j in range(1, m + 1):
                states.append(EditType(EditKind.ELAB, i, m, j))
                cls.append((L - 1) + (m - 1) if j == 1 else -1)
                exp_r.append(ev.rhythm_bin)

    pos = np.array([s.target_index for s in states], dtype=np.int64)
    kind = np.array([int(s.kind) for s in states], dtype=np.int64)
    order = np.array([s.order for s in states], dtype=np.int64)
    elab_j = np.array([s.elab_position for s in states], dtype=np.int64)
    is_elab = kind == EditKind.ELAB
    rhythm_emits = ~is_elab | (elab_j == order)
    agg_len = np.where(is_elab, order, 1)

    entries = {i: [e for e, s in enumerate(states) if s.target_index == i and cls[e] >= 0] for i in range(1, n + 1)}

    ptr = [0]
    idx: list[int] = []
    for e, s in enumerate(states):
        if s.kind == EditKind.ELAB and s.elab_position < s.order:
            idx.append(e + 1)  # deterministic chain
        else:
            nxt = s.target_index + (s.order if s.kind == EditKind.JOIN else 1)
            idx.extend(entries.get(nxt, []))
        ptr.append(len(idx))

    return TargetModel(
        target=target,
        L=L,
        M=M,
        start_index=start_index,
        edit_states=tuple(states),
        pos=pos,
        kind=kind,
        order=order,
        elab_j=elab_j,
        edit_class=np.array(cls, dtype=np.int64),
        expected_pitch=np.array([target[i - 1].pitch_class for i in pos], dtype=np.int64),
        expected_rhythm=np.array(exp_r, dtype=np.int64),
        rhythm_emits=rhythm_emits,
        agg_len=agg_len.astype(np.int64),
        succ_ptr=np.array(ptr, dtype=np.int64),
        succ_idx=np.array(idx, dtype=np.int64),
    )


# -- probability functions --------------------------------------------------


def _check_params(params: ErrorModelParams, model: TargetModel) -> None:
    if (params.L, params.M) != (model.L, model.M):
        raise ValueError(f"params are for L={params.L}, M={params.M}; model has L={model.L}, M={model.M}")


def _as_edit_index(model: TargetModel, s) -> int:
    if isinstance(s, HiddenState):
        return model.edit_index(s.edit)
    if isinstance(s, EditType):
        return model.edit_index(s)
    return int(s)


def _available_classes(model: TargetModel, i: int) -> np.ndarray:
    return np.unique(model.edit_class[model.entry_states(i)])


def edit_normalizer(params: ErrorModelParams, model: TargetModel, ctx: int, i: int) -> float:
    """Mass of the edit classifications that exist at target position ``i``."""
    return float(params.edit[ctx, _available_classes(model, i)].sum())


def edit_transition_prob(params: ErrorModelParams, model: TargetModel, from_state, to_state) -> float:
    """Edit component of a transition; depends only on the destination's classification."""
    x = _as_edit_index(model, from_state)
    y = _as_edit_index(model, to_state)
    if y not in model.successors(x):
        return 0.0
    if model.edit_class[y] < 0:
        return 1.0
    ctx = int(params.context_map.assign(model)["edit"][x])
    z = edit_normalizer(params, model, ctx, int(model.pos[y]))
    return float(params.edit[ctx, model.edit_class[y]]) / z


def transition_prob(params: ErrorModelParams, model: TargetModel, sx: HiddenState, sy: HiddenState) -> float:
    ctx = params.context_map.assign(model)
    x = model.edit_index(sx.edit)
    a_e = edit_transition_prob(params, model, sx, sy)
    if a_e == 0.0:
        return 0.0
    dk = int(wrap_pitch(sy.transposition - sx.transposition))
    a_k = float(params.modulation[ctx["modulation"][x], dk + K_OFFSET])
    ds = sy.tempo - sx.tempo
    if abs(ds) > 4:
        return 0.0
    row = params.tempo_change[ctx["tempo_change"][x]]
    z = sum(row[d + S_OFFSET] for d in range(-4, 5) if -4 <= sx.tempo + d <= 4)
    a_s = float(row[ds + S_OFFSET]) / z if z > 0 else 0.0
    return a_e * a_k * a_s


def observed_rhythm(query: Sequence[QuantizedEvent], t: int, agg_len: int, cfg: QuantizationConfig = DEFAULT_QUANTIZATION):
    """Rhythm bin observed at 0-based step ``t`` for a state aggregating ``agg_len`` notes.

    Returns None when the aggregation window would start before the query.
    """
    if agg_len == 1:
        return query[t].rhythm_bin
    lo = t - agg_len + 1
    if lo < 0:
        return None
    return aggregate_bin([query[u].raw_ioi_ms for u in range(lo, t + 1)], cfg)


def emission_prob(
    params: ErrorModelParams,
    model: TargetModel,
    state: HiddenState,
    query: Sequence[QuantizedEvent],
    t: int,
    cfg: QuantizationConfig = DEFAULT_QUANTIZATION,
) -> float:
    """b_x(o_t) for 0-based query step ``t``."""
    ctx = params.context_map.assign(model)
    e = model.edit_index(state.edit)
    dp = int(wrap_pitch(query[t].pitch_class - (model.expected_pitch[e] + state.transposition)))
    b_p = float(params.pitch_error[ctx["pitch_error"][e], dp + K_OFFSET])
    if not model.rhythm_emits[e]:
        return b_p
    obs = observed_rhythm(query, t, int(model.agg_len[e]), cfg)
    if obs is None:
        return 0.0
    r = params.q - 1
    dr = int(np.clip(obs - (model.expected_rhythm[e] + state.tempo), -r, r))
    return b_p * float(params.rhythm_error[ctx["rhythm_error"][e], dr + r])


def initial_edit_probs(params: ErrorModelParams, model: TargetModel, start_index: int | None = None) -> np.ndarray:
    """pi^E over edit states for one start alignment, tied to the edit transition table."""
    i = model.start_index if start_index is None else start_index
    ctx = params.context_map.assign(model)["edit"]
    out = np.zeros(model.n_edit)
    fam = model.entry_states(i)
    c = int(ctx[fam[0]])
    out[fam] = params.edit[c, model.edit_class[fam]] / edit_normalizer(params, model, c, i)
    return out


def initial_prob(params: ErrorModelParams, model: TargetModel, state: HiddenState, start_index: int | None = None) -> float:
    e = model.edit_index(state.edit)
    pe = initial_edit_probs(params, model, start_index)[e]
    pk = params.initial_transposition()[state.transposition + K_OFFSET]
    ps = params.initial_tempo()[state.tempo + S_OFFSET]
    return float(pe * pk * ps)


def initial_distribution(params: ErrorModelParams, model: TargetModel, start_index: int | None = None) -> np.ndarray:
    """Full initial distribution as an ``(n_edit, 12, 9)`` array."""
    pe = initial_edit_probs(params, model, start_index)
    return pe[:, None, None] * params.initial_transposition()[None, :, None] * params.initial_tempo()[None, None, :]


def all_starts_initial(params: ErrorModelParams, model: TargetModel) -> np.ndarray:
    """Per-edit-state pi^E where every state takes the value from its own start family.

    Each entry state belongs to exactly one start family, so this vector is the
    element-wise max over all per-start initial vectors.
    """
    out = np.zeros(model.n_edit)
    for i in range(1, model.target_length + 1):
        out += initial_edit_probs(params, model, i)
    return out


def edge_probabilities(params: ErrorModelParams, model: TargetModel, ctx_edit: np.ndarray | None = None) -> np.ndarray:
    """a^E for every successor edge, aligned with ``model.succ_idx``."""
    _check_params(params, model)
    if ctx_edit is None:
        ctx_edit = params.context_map.assign(model)["edit"]
    n = model.target_length
    n_cls = params.n_edit_classes
    # availability of each classification at each position (1..n+1)
    avail = np.zeros((n + 2, n_cls), dtype=bool)
    for e in range(model.n_edit):
        if model.edit_class[e] >= 0:
            avail[model.pos[e], model.edit_class[e]] = True
    z = params.edit @ avail.T  # (n_ctx, n+2)
    src = np.repeat(np.arange(model.n_edit), np.diff(model.succ_ptr))
    dst = model.succ_idx
    c = ctx_edit[src]
    cls = model.edit_class[dst]
    out = np.ones(len(dst))
    reg = cls >= 0
    out[reg] = params.edit[c[reg], cls[reg]] / z[c[reg], model.pos[dst[reg]]]
    return out


def edit_ghost_weights(params: ErrorModelParams, model: TargetModel, ctx_edit: np.ndarray) -> np.ndarray:
    """``W[x, c]`` = P^E(c)/Z_x for classifications unavailable after state ``x``.

    Zero for chain-internal sources and for sources without successors.
    """
    n = model.target_length
    n_cls = params.n_edit_classes
    avail = np.zeros((n + 2, n_cls), dtype=bool)
    for e in range(model.n_edit):
        if model.edit_class[e] >= 0:
            avail[model.pos[e], model.edit_class[e]] = True
    out = np.zeros((model.n_edit, n_cls))
    for x in range(model.n_edit):
        succ = model.successors(x)
        if len(succ) == 0 or model.edit_class[succ[0]] < 0:
            continue
        i = int(model.pos[succ[0]])
        row = params.edit[ctx_edit[x]]
        z = row[avail[i]].sum()
        out[x] = np.where(avail[i], 0.0, row / z)
    return out


def max_step_factor(params: ErrorModelParams, model: TargetModel) -> float:
    """Upper bound f on any single step's transition x emission factor."""
    ctx = params.context_map.assign(model)
    ep = edge_probabilities(params, model, ctx["edit"])
    a_e = ep.max() if len(ep) else 0.0
    a_k = params.modulation[np.unique(ctx["modulation"])].max()
    a_s = params.tempo_matrices()[np.unique(ctx["tempo_change"])].max()
    b_p = params.pitch_error[ctx["pitch_error"]].max(axis=1)
    b_r = np.where(model.rhythm_emits, params.rhythm_error[ctx["rhythm_error"]].max(axis=1), 1.0)
    return float(min(1.0, a_e * a_k * a_s * (b_p * b_r).max()))


def dense_transition_matrix(params: ErrorModelParams, model: TargetModel) -> np.ndarray:
    """Full ``n x n`` transition matrix built from the per-component rules (reference path)."""
    ctx = params.context_map.assign(model)
    n = model.n_states
    A = np.zeros((n, n))
    ep = edge_probabilities(params, model, ctx["edit"])
    MK = params.modulation_matrices()
    MS = params.tempo_matrices()
    for x in range(model.n_edit):
        lo, hi = model.succ_ptr[x], model.succ_ptr[x + 1]
        cluster = np.kron(MK[ctx["modulation"][x]], MS[ctx["tempo_change"][x]])
        for k in range(lo, hi):
            y = model.succ_idx[k]
            A[x * N_CLUSTER : (x + 1) * N_CLUSTER, y * N_CLUSTER : (y + 1) * N_CLUSTER] = ep[k] * cluster
    return A


def state_count(model: TargetModel) -> int:
    return model.n_edit * N_CLUSTER
