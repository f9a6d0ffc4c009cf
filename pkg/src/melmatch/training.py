"""Tied-parameter Baum-Welch for the error model.

Expected counts are pooled per context: every transition contributes to the
edit, modulation and tempo-change tables of its source state's contexts, and
every emission to the pitch/rhythm-error tables. Edit and tempo-change rows
are renormalized over the destinations that exist (target tail, tempo
range); their counts carry the matching "ghost" mass for the unavailable
bins so the update stays an exact EM step for the truncated distributions.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import backend
from .events import QuantizedEvent
from .lattice import BackwardTable, ForwardTable, backward, compile_model, emissions, forward
from .model import TargetModel, build_target_model, edit_ghost_weights, emission_prob, transition_prob
from .params import COMPONENTS, ErrorModelParams

log = logging.getLogger(__name__)


class ZeroLikelihoodError(ValueError):
    pass


@dataclass
class ExpectedCounts:
    """Context-level expected counts; ``a + b`` merges disjoint query sets."""

    edit: np.ndarray  # transitions into each edit classification
    edit_initial: np.ndarray  # initial-state occupancy per classification
    edit_ghost: np.ndarray  # mass for classifications unavailable at the destination
    chain: float  # transitions inside deterministic elaboration chains
    modulation: np.ndarray
    tempo_change: np.ndarray
    tempo_ghost: np.ndarray  # mass for tempo changes that would leave the range
    pitch_error: np.ndarray
    rhythm_error: np.ndarray
    log_likelihood: float = 0.0
    n_queries: int = 0
    n_skipped: int = 0

    @classmethod
    def zeros(cls, params: ErrorModelParams) -> "ExpectedCounts":
        z = {name: np.zeros_like(getattr(params, name)) for name in COMPONENTS}
        return cls(
            edit=z["edit"],
            edit_initial=np.zeros_like(z["edit"]),
            edit_ghost=np.zeros_like(z["edit"]),
            chain=0.0,
            modulation=z["modulation"],
            tempo_change=z["tempo_change"],
            tempo_ghost=np.zeros_like(z["tempo_change"]),
            pitch_error=z["pitch_error"],
            rhythm_error=z["rhythm_error"],
        )

    _ARRAYS = ("edit", "edit_initial", "edit_ghost", "modulation", "tempo_change", "tempo_ghost", "pitch_error", "rhythm_error")

    def __add__(self, other: "ExpectedCounts") -> "ExpectedCounts":
        kw = {name: getattr(self, name) + getattr(other, name) for name in self._ARRAYS}
        return ExpectedCounts(
            **kw,
            chain=self.chain + other.chain,
            log_likelihood=self.log_likelihood + other.log_likelihood,
            n_queries=self.n_queries + other.n_queries,
            n_skipped=self.n_skipped + other.n_skipped,
        )

    def table_counts(self) -> dict[str, np.ndarray]:
        """Per-component counts as used by re-estimation."""
        return {
            "edit": self.edit + self.edit_initial + self.edit_ghost,
            "modulation": self.modulation,
            "tempo_change": self.tempo_change + self.tempo_ghost,
            "pitch_error": self.pitch_error,
            "rhythm_error": self.rhythm_error,
        }

    def context_mass(self) -> dict[str, np.ndarray]:
        return {k: v.sum(axis=1) for k, v in self.table_counts().items()}


def _scale_factors(fw: ForwardTable, bw: BackwardTable) -> tuple[np.ndarray, np.ndarray]:
    lc = np.cumsum(np.log(fw.scale))
    ld = bw.log_cumulative()
    ll = fw.log_likelihood
    gfac = np.exp(lc + ld - ll)
    xfac = np.exp(lc[:-1] + ld[1:] - ll)
    return gfac, xfac


def posterior_gamma(fw: ForwardTable, bw: BackwardTable) -> np.ndarray:
    """gamma_t(x) as a (T, n) array; each row sums to 1."""
    if not np.isfinite(fw.log_likelihood):
        raise ZeroLikelihoodError("query has zero probability under model")
    gfac, _ = _scale_factors(fw, bw)
    return fw.as_matrix() * bw.as_matrix() * gfac[:, None]


def posterior_xi(
    fw: ForwardTable,
    bw: BackwardTable,
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    t: int,
    x: int,
    y: int,
) -> float:
    """xi_t(x, y): probability of state x at step t and y at t+1 (0-based t, flat indices)."""
    if not np.isfinite(fw.log_likelihood):
        raise ZeroLikelihoodError("query has zero probability under model")
    if not 0 <= t < len(query) - 1:
        raise ValueError("t must satisfy 0 <= t < T-1")
    _, xfac = _scale_factors(fw, bw)
    sx, sy = model.state(x), model.state(y)
    a = transition_prob(params, model, sx, sy)
    if a == 0.0:
        return 0.0
    b = emission_prob(params, model, sy, query, t + 1)
    return float(fw.as_matrix()[t, x] * a * b * bw.as_matrix()[t + 1, y] * xfac[t])


def accumulate_counts(
    model: TargetModel,
    params: ErrorModelParams,
    query: Sequence[QuantizedEvent],
    start_index: int | None = None,
) -> ExpectedCounts:
    """Expected counts for one (target, query) pair at a fixed start alignment.

    A query with zero likelihood contributes nothing and is tallied in ``n_skipped``.
    """
    out = ExpectedCounts.zeros(params)
    if len(query) == 0:
        raise ValueError("query length 0")
    if start_index is not None and start_index != model.start_index:
        model = model.with_start(start_index)
    cm = compile_model(model, params)
    em = emissions(cm, query)
    fw = forward(model, params, query, cm, em)
    if not np.isfinite(fw.log_likelihood):
        out.n_skipped = 1
        return out
    bw = backward(model, params, query, cm, em)
    gfac, xfac = _scale_factors(fw, bw)

    E = model.n_edit
    ncls = params.n_edit_classes
    cE = np.zeros((E, ncls))
    chain = np.zeros(1)
    rowmass = np.zeros_like(out.tempo_change)
    ctx = cm.ctx
    backend.get().counts(
        fw.alpha, bw.beta, gfac, xfac, em.pf, em.rf, em.dP, em.dR,
        cm.MK, cm.MS, ctx["modulation"], ctx["tempo_change"], ctx["pitch_error"], ctx["rhythm_error"],
        model.succ_ptr, model.succ_idx, cm.edge_prob, model.edit_class,
        cE, chain, out.modulation, out.tempo_change, rowmass, out.pitch_error, out.rhythm_error,
    )
    ce = ctx["edit"]
    np.add.at(out.edit, ce, cE)
    ghost = edit_ghost_weights(params, model, ce)
    np.add.at(out.edit_ghost, ce, cE.sum(axis=1)[:, None] * ghost)
    out.tempo_ghost += np.einsum("cs,csd->cd", rowmass, params.tempo_ghost_weights())

    # occupancy of the first state, whose edit probability is tied to the edit table
    g0 = (fw.alpha[0] * bw.beta[0]).sum(axis=(1, 2)) * gfac[0]
    fam = model.entry_states(model.start_index)
    c0 = int(ce[fam[0]])
    np.add.at(out.edit_initial[c0], model.edit_class[fam], g0[fam])
    row = params.edit[c0]
    avail = np.zeros(ncls, dtype=bool)
    avail[model.edit_class[fam]] = True
    out.edit_ghost[c0] += g0[fam].sum() * np.where(avail, 0.0, row / row[avail].sum())

    out.chain = float(chain[0])
    out.log_likelihood = fw.log_likelihood
    out.n_queries = 1
    return out


def reestimate(
    counts: ExpectedCounts,
    previous: ErrorModelParams,
    floor: float = 1e-6,
    support: dict[str, np.ndarray] | None = None,
) -> tuple[ErrorModelParams, list[str]]:
    """Normalize counts into new tables.

    ``floor`` is added to every bin in ``support`` (default: the bins where
    ``previous`` is positive) before renormalizing; bins outside the support
    stay exactly zero. A context with no counts keeps its previous row and is
    reported in the returned flag list.
    """
    if floor < 0:
        raise ValueError("floor must be >= 0")
    if support is None:
        support = {name: getattr(previous, name) > 0 for name in COMPONENTS}
    tables = {}
    flags = []
    for name, c in counts.table_counts().items():
        old = getattr(previous, name)
        new = np.array(old, dtype=float)
        mask = support[name]
        c = np.where(mask, c, 0.0)
        for r in range(c.shape[0]):
            tot = c[r].sum()
            if not tot > 0:
                flags.append(f"{name}[{r}]: no counts, previous distribution kept")
                continue
            p = c[r] / tot + floor * mask[r]
            new[r] = p / p.sum()
        tables[name] = new
    return previous.replace(**tables), flags


def max_param_change(a: ErrorModelParams, b: ErrorModelParams) -> float:
    return max(float(np.abs(getattr(a, n) - getattr(b, n)).max()) for n in COMPONENTS)


@dataclass
class TrainingPair:
    target: Sequence[QuantizedEvent]
    query: Sequence[QuantizedEvent]
    start_index: int = 1


@dataclass
class TrainingReport:
    iterations: int
    log_likelihood_trace: list[float]
    converged: bool
    final_params: ErrorModelParams
    flags: list[str] = field(default_factory=list)
    skipped_queries: int = 0
    safeguard_steps: int = 0

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "log_likelihood_trace": self.log_likelihood_trace,
            "skipped_queries": self.skipped_queries,
            "safeguard_steps": self.safeguard_steps,
            "flags": self.flags,
            "final_params": self.final_params.to_json_dict(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)


def expected_counts(
    models: Sequence[TargetModel],
    queries: Sequence[Sequence[QuantizedEvent]],
    params: ErrorModelParams,
    threads: int = 1,
) -> ExpectedCounts:
    """Sum of per-pair counts; pairs are independent and may run on several threads."""
    jobs = list(zip(models, queries))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda mq: accumulate_counts(mq[0], params, mq[1]), jobs))
    else:
        parts = [accumulate_counts(m, params, q) for m, q in jobs]
    total = ExpectedCounts.zeros(params)
    for p in parts:
        total = total + p
    return total


def train(
    pairs: Iterable[TrainingPair | tuple],
    init: ErrorModelParams,
    tol: float = 1e-4,
    max_iter: int = 100,
    floor: float = 1e-6,
    threads: int = 1,
    callback=None,
) -> TrainingReport:
    """Baum-Welch until the largest parameter change is below ``tol``.

    The trace holds the total log-likelihood before the first update and
    after each one. A smoothed update that would lower the likelihood is
    replaced by the plain EM update, which cannot.
    """
    pairs = [p if isinstance(p, TrainingPair) else TrainingPair(*p) for p in pairs]
    if not pairs:
        raise ValueError("no training pairs")
    models = [build_target_model(p.target, init.L, init.M, p.start_index) for p in pairs]
    queries = [p.query for p in pairs]
    support = {name: getattr(init, name) > 0 for name in COMPONENTS}

    params = init
    counts = expected_counts(models, queries, params, threads)
    if counts.n_queries == 0:
        raise ValueError("no scorable queries")
    if counts.n_skipped:
        log.warning("%d of %d training queries have zero likelihood and are skipped", counts.n_skipped, len(pairs))
    trace = [counts.log_likelihood]
    flags: list[str] = []
    safeguard = 0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        new, fl = reestimate(counts, params, floor, support)
        new_counts = expected_counts(models, queries, new, threads)
        if floor > 0 and not new_counts.log_likelihood >= trace[-1]:
            new, fl = reestimate(counts, params, 0.0, support)
            new_counts = expected_counts(models, queries, new, threads)
            safeguard += 1
        flags.extend(f"iteration {it}: {f}" for f in fl)
        change = max_param_change(params, new)
        params, counts = new, new_counts
        trace.append(counts.log_likelihood)
        if callback is not None:
            callback(it, params, counts.log_likelihood)
        if change < tol:
            converged = True
            break
    return TrainingReport(
        iterations=it,
        log_likelihood_trace=trace,
        converged=converged,
        final_params=params,
        flags=flags,
        skipped_queries=counts.n_skipped,
        safeguard_steps=safeguard,
    )


def total_log_likelihood(pairs, params: ErrorModelParams) -> float:
    tot = 0.0
    for p in pairs:
        p = p if isinstance(p, TrainingPair) else TrainingPair(*p)
        m = build_target_model(p.target, params.L, params.M, p.start_index)
        ll = forward(m, params, p.query).log_likelihood
        if math.isfinite(ll):
            tot += ll
    return tot
