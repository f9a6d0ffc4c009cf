"""Inference over a (target model, query) pair.

Forward and backward passes are scaled per step; Viterbi runs in log space
with optional branch-and-bound. The hot loops live in the kernel backends
(see :mod:`melmatch.backend`); this module prepares their inputs and wraps
their outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backend
from .events import QuantizationConfig, QuantizedEvent
from .model import (
    N_CLUSTER,
    HiddenState,
    TargetModel,
    all_starts_initial,
    dense_transition_matrix,
    edge_probabilities,
    edit_ghost_weights,
    emission_prob,
    initial_distribution,
    initial_edit_probs,
    max_step_factor,
    observed_rhythm,
)
from .params import K_VALUES, N_K, N_S, S_VALUES, ErrorModelParams


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


@dataclass(eq=False)
class CompiledModel:
    """A target model bound to one parameter set, in kernel-ready arrays."""

    model: TargetModel
    params: ErrorModelParams
    ctx: dict
    MK: np.ndarray
    MS: np.ndarray
    edge_prob: np.ndarray
    pi_edit_all: np.ndarray
    step_factor: float
    cfg: QuantizationConfig
    _logs: dict = field(default_factory=dict)

    @property
    def lMK(self):
        if "MK" not in self._logs:
            self._logs["MK"] = _log(self.MK)
        return self._logs["MK"]

    @property
    def lMS(self):
        if "MS" not in self._logs:
            self._logs["MS"] = _log(self.MS)
        return self._logs["MS"]

    @property
    def log_edge(self):
        if "ep" not in self._logs:
            self._logs["ep"] = _log(self.edge_prob)
        return self._logs["ep"]

    def kernel_topology(self):
        m = self.model
        return (
            self.MK,
            self.MS,
            self.ctx["modulation"],
            self.ctx["tempo_change"],
            m.succ_ptr,
            m.succ_idx,
            self.edge_prob,
        )

    def initial(self, start_index: int | None = None) -> np.ndarray:
        """``(E, 12, 9)`` initial distribution; ``start_index=0`` combines all starts."""
        if start_index == 0:
            pe = self.pi_edit_all
        else:
            pe = initial_edit_probs(self.params, self.model, start_index)
        return (
            pe[:, None, None]
            * self.params.initial_transposition()[None, :, None]
            * self.params.initial_tempo()[None, None, :]
        )


def compile_model(model: TargetModel, params: ErrorModelParams, cfg: QuantizationConfig | None = None) -> CompiledModel:
    if (params.L, params.M) != (model.L, model.M):
        raise ValueError("parameter L/M do not match the target model")
    ctx = {k: np.ascontiguousarray(v, dtype=np.int64) for k, v in params.context_map.assign(model).items()}
    return CompiledModel(
        model=model,
        params=params,
        ctx=ctx,
        MK=np.ascontiguousarray(params.modulation_matrices()),
        MS=np.ascontiguousarray(params.tempo_matrices()),
        edge_prob=edge_probabilities(params, model, ctx["edit"]),
        pi_edit_all=all_starts_initial(params, model),
        step_factor=max_step_factor(params, model),
        cfg=cfg or QuantizationConfig(q=params.q),
    )


@dataclass
class Emissions:
    pf: np.ndarray  # (T, E, 12)
    rf: np.ndarray  # (T, E, 9)
    dP: np.ndarray  # (T, E, 12) pitch-error bin index
    dR: np.ndarray  # (T, E, 9) rhythm-error bin index, -1 where no rhythm factor

    @property
    def T(self):
        return self.pf.shape[0]


def emissions(cm: CompiledModel, query: Sequence[QuantizedEvent]) -> Emissions:
    m, p = cm.model, cm.params
    T = len(query)
    if T == 0:
        raise ValueError("query length 0")
    qp = np.array([ev.pitch_class for ev in query], dtype=np.int64)
    dP = (qp[:, None, None] - m.expected_pitch[None, :, None] - K_VALUES[None, None, :] + 5) % 12
    pf = p.pitch_error[cm.ctx["pitch_error"][None, :, None], dP]

    obs = np.zeros((T, m.n_edit), dtype=np.int64)
    defined = np.ones((T, m.n_edit), dtype=bool)
    for agg in np.unique(m.agg_len):
        cols = m.agg_len == agg
        for t in range(T):
            r = observed_rhythm(query, t, int(agg), cm.cfg)
            if r is None:
                defined[t, cols] = False
            else:
                obs[t, cols] = r
    rmax = p.q - 1
    dR = np.clip(obs[:, :, None] - m.expected_rhythm[None, :, None] - S_VALUES[None, None, :], -rmax, rmax) + rmax
    emits = m.rhythm_emits[None, :, None]
    rf = np.where(emits, np.where(defined[:, :, None], p.rhythm_error[cm.ctx["rhythm_error"][None, :, None], dR], 0.0), 1.0)
    dR = np.where(emits & defined[:, :, None], dR, -1)
    return Emissions(
        pf=np.ascontiguousarray(pf),
        rf=np.ascontiguousarray(rf),
        dP=np.ascontiguousarray(dP),
        dR=np.ascontiguousarray(dR),
    )


# -- result types ---------------------------------------------------------------


@dataclass
class ForwardTable:
    alpha: np.ndarray  # (T, E, 12, 9), each step normalized to sum 1
    scale: np.ndarray  # (T,)
    log_likelihood: float
    ops: int = 0

    def as_matrix(self) -> np.ndarray:
        return self.alpha.reshape(self.alpha.shape[0], -1)

    def unscaled(self) -> np.ndarray:
        """alpha_t(x) without scaling; underflows for long queries."""
        with np.errstate(divide="ignore"):
            cum = np.exp(np.cumsum(np.log(self.scale)))
        return self.as_matrix() * cum[:, None]


@dataclass
class BackwardTable:
    beta: np.ndarray  # (T, E, 12, 9); beta[T-1] = 1
    scale: np.ndarray  # beta_t = beta_hat_t * prod_{u >= t} scale[u]

    def as_matrix(self) -> np.ndarray:
        return self.beta.reshape(self.beta.shape[0], -1)

    def log_cumulative(self) -> np.ndarray:
        """``sum_{u >= t} log scale[u]`` per t."""
        ls = _log(self.scale)
        return np.cumsum(ls[::-1])[::-1]


@dataclass
class ViterbiResult:
    log_prob: float
    path: list[HiddenState]
    state_indices: np.ndarray
    pruned: bool = False

    @property
    def prob(self) -> float:
        return float(np.exp(self.log_prob))


# -- inference ------------------------------------------------------------------


def _prepare(model, params, query, cm):
    if cm is None:
        cm = compile_model(model, params)
    return cm, emissions(cm, query)


def forward(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    cm: CompiledModel | None = None,
    em: Emissions | None = None,
    start_index: int | None = None,
) -> ForwardTable:
    """Scaled forward pass for one start alignment (``model.start_index`` by default)."""
    if len(query) == 0:
        raise ValueError("query length 0")
    if cm is None:
        cm = compile_model(model, params)
    if em is None:
        em = emissions(cm, query)
    T, E = em.pf.shape[:2]
    alpha = np.zeros((T, E, N_K, N_S))
    scale = np.zeros(T)
    ops = np.zeros(1, dtype=np.int64)
    pi = cm.initial(model.start_index if start_index is None else start_index)
    MK, MS, ck, cs, ptr, idx, ep = cm.kernel_topology()
    done = backend.get().forward(em.pf, em.rf, pi, MK, MS, ck, cs, ptr, idx, ep, alpha, scale, ops)
    ll = float(np.log(scale).sum()) if done == T else -np.inf
    return ForwardTable(alpha=alpha, scale=scale, log_likelihood=ll, ops=int(ops[0]))


def backward(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    cm: CompiledModel | None = None,
    em: Emissions | None = None,
) -> BackwardTable:
    if len(query) == 0:
        raise ValueError("query length 0")
    if cm is None:
        cm = compile_model(model, params)
    if em is None:
        em = emissions(cm, query)
    T, E = em.pf.shape[:2]
    beta = np.zeros((T, E, N_K, N_S))
    scale = np.zeros(T)
    MK, MS, ck, cs, ptr, idx, ep = cm.kernel_topology()
    backend.get().backward(em.pf, em.rf, MK, MS, ck, cs, ptr, idx, ep, beta, scale)
    return BackwardTable(beta=beta, scale=scale)


def start_log_likelihoods(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    cm: CompiledModel | None = None,
    em: Emissions | None = None,
) -> np.ndarray:
    """log Pr(O | start alignment i) for every i = 1..|target| from one backward pass.

    The backward variable at t=1 does not depend on the initial distribution,
    so each alignment's likelihood is a dot product with its own pi.
    """
    if cm is None:
        cm = compile_model(model, params)
    if em is None:
        em = emissions(cm, query)
    bt = backward(model, params, query, cm, em)
    n = model.target_length
    if not np.all(bt.scale > 0):
        return np.full(n, -np.inf)
    pk = params.initial_transposition()
    ps = params.initial_tempo()
    first = np.einsum("ek,es,eks,k,s->e", em.pf[0], em.rf[0], bt.beta[0], pk, ps)
    w = cm.pi_edit_all * first
    per_start = np.bincount(model.pos - 1, weights=w, minlength=n)
    return _log(per_start) + bt.log_cumulative()[0]


def _viterbi(cm, em, start_index, floor, tol=None):
    T, E = em.pf.shape[:2]
    V = np.empty((T, E, N_K, N_S))
    bx = np.zeros((T, E, N_K, N_S), dtype=np.int64)
    bk = np.zeros((T, E, N_K, N_S), dtype=np.int64)
    bs = np.zeros((T, E, N_K, N_S), dtype=np.int64)
    lpi = _log(cm.initial(start_index))
    logf = float(np.log(cm.step_factor)) if cm.step_factor > 0 else -np.inf
    if tol is None:
        tol = 1e-9 * max(1.0, abs(floor)) if np.isfinite(floor) else 0.0
    m = cm.model
    done = backend.get().viterbi(
        _log(em.pf), _log(em.rf), lpi, cm.lMK, cm.lMS,
        cm.ctx["modulation"], cm.ctx["tempo_change"], m.succ_ptr, m.succ_idx, cm.log_edge,
        float(floor), logf, float(tol), V, bx, bk, bs,
    )
    if done < T:
        return ViterbiResult(-np.inf, [], np.zeros(0, dtype=np.int64), pruned=np.isfinite(floor))
    last = V[T - 1].reshape(-1)
    best = int(np.argmax(last))
    lp = float(last[best])
    if lp == -np.inf:
        return ViterbiResult(-np.inf, [], np.zeros(0, dtype=np.int64), pruned=np.isfinite(floor))
    if np.isfinite(floor) and lp < floor - tol:
        return ViterbiResult(lp, [], np.zeros(0, dtype=np.int64), pruned=True)
    e, rem = divmod(best, N_CLUSTER)
    k, s = divmod(rem, N_S)
    states = [best]
    for t in range(T - 1, 0, -1):
        x = bx[t, e, k, s]
        kk = bk[t, x, k, s]
        ss = bs[t, x, kk, s]
        e, k, s = int(x), int(kk), int(ss)
        states.append(e * N_CLUSTER + k * N_S + s)
    states = np.array(states[::-1], dtype=np.int64)
    return ViterbiResult(lp, [m.state(x) for x in states], states)


def viterbi(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    all_starts: bool = False,
    cm: CompiledModel | None = None,
    em: Emissions | None = None,
) -> ViterbiResult:
    """Most likely hidden path. With ``all_starts`` the best path over every start alignment."""
    if len(query) == 0:
        raise ValueError("query length 0")
    cm, em = (cm, em) if (cm is not None and em is not None) else _prepare(model, params, query, cm)
    return _viterbi(cm, em, 0 if all_starts else model.start_index, -np.inf)


def viterbi_bounded(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    floor_log_prob: float,
    all_starts: bool = False,
    cm: CompiledModel | None = None,
    em: Emissions | None = None,
) -> ViterbiResult:
    """Viterbi that abandons paths whose bound ``alpha_t f^(T-t)`` falls below the floor.

    Exact whenever the true score reaches the floor; otherwise may return a
    result with ``pruned=True``.
    """
    if len(query) == 0:
        raise ValueError("query length 0")
    cm, em = (cm, em) if (cm is not None and em is not None) else _prepare(model, params, query, cm)
    return _viterbi(cm, em, 0 if all_starts else model.start_index, floor_log_prob)


# -- reference paths ------------------------------------------------------------


def emission_matrix(model: TargetModel, params: ErrorModelParams, query, cfg=None) -> np.ndarray:
    """``B[t, x]`` for every full hidden state, via the scalar emission rule."""
    cfg = cfg or QuantizationConfig(q=params.q)
    T = len(query)
    B = np.zeros((T, model.n_states))
    for x in range(model.n_states):
        st = model.state(x)
        for t in range(T):
            B[t, x] = emission_prob(params, model, st, query, t, cfg)
    return B


def naive_forward(model: TargetModel, params: ErrorModelParams, query, start_index: int | None = None) -> np.ndarray:
    """Unscaled dense forward over the full state space; returns alpha as (T, n).

    Reference for the factored kernels: every transition is the full product
    of its edit, modulation and tempo factors.
    """
    A = dense_transition_matrix(params, model)
    B = emission_matrix(model, params, query)
    pi = initial_distribution(params, model, start_index).reshape(-1)
    T = len(query)
    alpha = np.zeros((T, model.n_states))
    alpha[0] = pi * B[0]
    for t in range(1, T):
        alpha[t] = (alpha[t - 1] @ A) * B[t]
    return alpha


def _enumerate_paths(model, params, query, start_index, guard):
    A = dense_transition_matrix(params, model)
    B = emission_matrix(model, params, query)
    pi = initial_distribution(params, model, start_index).reshape(-1)
    rows = [np.flatnonzero(A[x]) for x in range(A.shape[0])]
    deg = np.array([len(r) for r in rows], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(deg)])
    indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    data = A[np.repeat(np.arange(A.shape[0]), deg), indices]

    last = np.flatnonzero(pi)
    prob = pi[last] * B[0, last]
    levels = [(last, None)]
    enumerated = len(last)
    for t in range(1, len(query)):
        d = deg[last]
        enumerated += int(d.sum())
        if enumerated > guard:
            raise ValueError(f"enumeration guard: more than {guard} paths")
        rep = np.repeat(np.arange(len(last)), d)
        offs = np.arange(int(d.sum())) - np.repeat(np.cumsum(d) - d, d)
        j = indptr[last][rep] + offs
        last = indices[j]
        prob = prob[rep] * data[j] * B[t, last]
        levels.append((last, rep))
    return prob, levels


def brute_force_likelihood(
    model: TargetModel,
    params: ErrorModelParams,
    query,
    start_index: int | None = None,
    guard: int = 10**7,
) -> float:
    """Pr(O | lambda) as an explicit sum over every hidden path of non-zero prior.

    Paths are enumerated one level at a time without merging paths that meet
    in the same state, so the work equals the number of paths.
    """
    if len(query) == 0:
        raise ValueError("query length 0")
    prob, _ = _enumerate_paths(model, params, query, start_index, guard)
    return float(prob.sum())


def brute_force_best_path(
    model: TargetModel,
    params: ErrorModelParams,
    query,
    start_index: int | None = None,
    guard: int = 10**7,
) -> tuple[float, np.ndarray]:
    """Maximum joint probability over all paths and one path that attains it."""
    if len(query) == 0:
        raise ValueError("query length 0")
    prob, levels = _enumerate_paths(model, params, query, start_index, guard)
    if len(prob) == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    k = int(np.argmax(prob))
    best = float(prob[k])
    path = []
    for states, parent in reversed(levels):
        path.append(int(states[k]))
        if parent is not None:
            k = int(parent[k])
    return best, np.array(path[::-1], dtype=np.int64)


# -- generic HMM (fixture engine) -------------------------------------------------


@dataclass
class GenericHmm:
    A: np.ndarray
    B: np.ndarray
    pi: np.ndarray
    symbols: tuple = ()
    states: tuple = ()

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        if not np.allclose(self.A.sum(axis=1), 1) or not np.allclose(self.B.sum(axis=1), 1):
            raise ValueError("rows of A and B must sum to 1")
        if not np.isclose(self.pi.sum(), 1):
            raise ValueError("initial distribution must sum to 1")
        if not self.symbols:
            self.symbols = tuple(range(self.B.shape[1]))

    def encode(self, observations) -> np.ndarray:
        lookup = {s: k for k, s in enumerate(self.symbols)}
        return np.array([lookup[o] for o in observations], dtype=np.int64)


def _generic_forward(A, Bt, pi):
    T = Bt.shape[0]
    alpha = np.zeros((T, len(pi)))
    alpha[0] = pi * Bt[0]
    for t in range(1, T):
        alpha[t] = (alpha[t - 1] @ A) * Bt[t]
    return alpha


def _generic_backward(A, Bt):
    T, n = Bt.shape
    beta = np.ones((T, n))
    for t in range(T - 2, -1, -1):
        beta[t] = A @ (Bt[t + 1] * beta[t + 1])
    return beta


def forward_generic(hmm: GenericHmm, observations) -> float:
    o = hmm.encode(observations)
    return float(_generic_forward(hmm.A, hmm.B[:, o].T, hmm.pi)[-1].sum())


def backward_generic(hmm: GenericHmm, observations) -> np.ndarray:
    o = hmm.encode(observations)
    return _generic_backward(hmm.A, hmm.B[:, o].T)


def forward_table_generic(hmm: GenericHmm, observations) -> np.ndarray:
    o = hmm.encode(observations)
    return _generic_forward(hmm.A, hmm.B[:, o].T, hmm.pi)


def path_probability(hmm: GenericHmm, observations, path) -> float:
    """Joint probability of observations and one state path (state names or indices)."""
    o = hmm.encode(observations)
    if hmm.states:
        lookup = {s: k for k, s in enumerate(hmm.states)}
        path = [lookup.get(p, p) for p in path]
    p = hmm.pi[path[0]] * hmm.B[path[0], o[0]]
    for t in range(1, len(o)):
        p *= hmm.A[path[t - 1], path[t]] * hmm.B[path[t], o[t]]
    return float(p)


def viterbi_generic(hmm: GenericHmm, observations) -> tuple[float, list]:
    o = hmm.encode(observations)
    T, n = len(o), len(hmm.pi)
    with np.errstate(divide="ignore"):
        lA, lB, lpi = np.log(hmm.A), np.log(hmm.B), np.log(hmm.pi)
    V = lpi + lB[:, o[0]]
    back = np.zeros((T, n), dtype=np.int64)
    for t in range(1, T):
        cand = V[:, None] + lA
        back[t] = np.argmax(cand, axis=0)
        V = cand.max(axis=0) + lB[:, o[t]]
    path = [int(np.argmax(V))]
    for t in range(T - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path = path[::-1]
    names = [hmm.states[p] for p in path] if hmm.states else path
    return float(np.exp(V.max())), names


def xi_generic(A, Bt, pi) -> np.ndarray:
    """xi_t(x, y) for t = 1..T-1 by direct evaluation of the normalized product."""
    alpha = _generic_forward(A, Bt, pi)
    beta = _generic_backward(A, Bt)
    num = alpha[:-1, :, None] * A[None] * (Bt[1:] * beta[1:])[:, None, :]
    return num / num.sum(axis=(1, 2), keepdims=True)


def baum_welch_step_generic(hmm: GenericHmm, observations) -> GenericHmm:
    """One untied re-estimation of pi, A and B."""
    o = hmm.encode(observations)
    Bt = hmm.B[:, o].T
    alpha = _generic_forward(hmm.A, Bt, hmm.pi)
    beta = _generic_backward(hmm.A, Bt)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = xi_generic(hmm.A, Bt, hmm.pi)
    A = xi.sum(axis=0) / gamma[:-1].sum(axis=0)[:, None]
    B = np.zeros_like(hmm.B)
    for t, sym in enumerate(o):
        B[:, sym] += gamma[t]
    B /= gamma.sum(axis=0)[:, None]
    return GenericHmm(A, B, gamma[0], hmm.symbols, hmm.states)


FAIR_DIE = np.full(6, 1.0 / 6.0)
LOADED_DIE = np.array([0.1, 0.1, 0.1, 0.5, 0.1, 0.1])


def dishonest_gambler() -> GenericHmm:
    """Two dice, switching with probability 0.1; always starts with the fair die."""
    return GenericHmm(
        A=[[0.9, 0.1], [0.1, 0.9]],
        B=[FAIR_DIE, LOADED_DIE],
        pi=[1.0, 0.0],
        symbols=(1, 2, 3, 4, 5, 6),
        states=("a", "b"),
    )


def honest_gambler() -> GenericHmm:
    return GenericHmm(A=[[1.0]], B=[FAIR_DIE], pi=[1.0], symbols=(1, 2, 3, 4, 5, 6), states=("a",))
