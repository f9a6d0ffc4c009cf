"""Database ranking, retrieval metrics and entropy utilities."""

from __future__ import annotations

import csv
import heapq
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import QuantizedEvent
from .lattice import (
    CompiledModel,
    compile_model,
    emissions,
    forward,
    start_log_likelihoods,
    viterbi_bounded,
)
from .model import TargetModel, build_target_model
from .params import ErrorModelParams, discrete_normal

METHODS = ("forward", "viterbi")
ALIGNMENTS = ("max", "first")


# -- ranking --------------------------------------------------------------------


def prepare_database(targets: Sequence, params: ErrorModelParams) -> list[CompiledModel]:
    """Compile every target once so that many queries can reuse the models."""
    out = []
    for t in targets:
        if isinstance(t, CompiledModel):
            out.append(t)
            continue
        m = t if isinstance(t, TargetModel) else build_target_model(t, params.L, params.M)
        out.append(compile_model(m, params))
    return out


def worst_case_rank(scores: Sequence[float], correct: int) -> int:
    """1 + number of other targets scoring at least as well as ``correct``.

    >>> worst_case_rank([0.5, 0.5, 0.5], 1)
    3
    >>> worst_case_rank([-1.0, -3.0, -2.0], 0)
    1
    """
    s = np.asarray(scores, dtype=float)
    # the correct target itself is included in the count
    return int(np.count_nonzero(s >= s[correct]))


class _TopK:
    """Thread-safe top-k heap whose k-th best score only ever rises."""

    def __init__(self, k: int):
        self.k = k
        self.heap: list[tuple[float, int]] = []
        self.lock = threading.Lock()

    @property
    def floor(self) -> float:
        # read without the lock: a stale value is lower, which only prunes less
        h = self.heap
        return h[0][0] if len(h) >= self.k else -math.inf

    def push(self, score: float, tid: int) -> None:
        with self.lock:
            # ties at the k-th place keep the lower target id
            item = (score, -tid)
            if len(self.heap) < self.k:
                heapq.heappush(self.heap, item)
            elif item > self.heap[0]:
                heapq.heapreplace(self.heap, item)

    def ranked(self) -> list[tuple[int, float]]:
        return [(-t, s) for s, t in sorted(self.heap, key=lambda st: (-st[0], -st[1]))]


@dataclass
class RankedResult:
    scores: np.ndarray  # per target; -inf where zero likelihood or pruned
    top: list[tuple[int, float]]  # (target_id, log-likelihood), best first
    correct_target_rank: int | None = None
    rank_exact: bool = True
    unscorable: bool = False
    pruned: np.ndarray | None = None
    seconds: float = 0.0

    def json_lines(self) -> list[dict]:
        rows = []
        for r, (tid, s) in enumerate(self.top, 1):
            rows.append({"target_id": int(tid), "log_likelihood": _json_float(s), "rank": r})
        return rows


def _json_float(x: float):
    return float(x) if math.isfinite(x) else None


def score_target(
    cm: CompiledModel,
    query: Sequence[QuantizedEvent],
    method: str = "forward",
    alignment: str = "max",
    floor: float = -math.inf,
) -> tuple[float, bool]:
    """Score one target; returns (log score, pruned)."""
    em = emissions(cm, query)
    if method == "forward":
        if alignment == "max":
            return float(np.max(start_log_likelihoods(cm.model, cm.params, query, cm, em))), False
        return forward(cm.model, cm.params, query, cm, em, start_index=1).log_likelihood, False
    if method == "viterbi":
        model = cm.model if alignment == "max" or cm.model.start_index == 1 else cm.model.with_start(1)
        res = viterbi_bounded(model, cm.params, query, floor, all_starts=alignment == "max", cm=cm, em=em)
        return res.log_prob, res.pruned
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def rank_database(
    params: ErrorModelParams,
    database: Sequence,
    query: Sequence[QuantizedEvent],
    k: int = 10,
    method: str = "forward",
    prune: bool = False,
    alignment: str = "max",
    correct: int | None = None,
    threads: int = 1,
) -> RankedResult:
    """Score every target and keep the top ``k``.

    Each target's score is the best over start alignments (``alignment="max"``)
    or the alignment at the first note. With ``method="viterbi"`` and
    ``prune`` the current k-th best score is the branch-and-bound floor;
    pruned targets are reported with score -inf. The returned rank of the
    ``correct`` target is exact whenever it is not pruned.
    """
    if len(database) == 0:
        raise ValueError("empty database")
    if alignment not in ALIGNMENTS:
        raise ValueError(f"unknown alignment {alignment!r}; choose from {ALIGNMENTS}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if prune and method != "viterbi":
        raise ValueError("pruning needs viterbi scoring")
    t0 = time.perf_counter()
    cms = prepare_database(database, params)
    n = len(cms)
    k = max(1, min(k, n))
    scores = np.full(n, -np.inf)
    pruned = np.zeros(n, dtype=bool)
    top = _TopK(k)

    def work(tid):
        floor = top.floor if prune and tid != correct else -math.inf
        s, p = score_target(cms[tid], query, method, alignment, floor)
        if p:
            pruned[tid] = True
            return
        scores[tid] = s
        top.push(s, tid)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(n)))
    else:
        for tid in range(n):
            work(tid)

    result = RankedResult(
        scores=scores,
        top=top.ranked(),
        unscorable=not np.isfinite(scores).any() and not pruned.any(),
        pruned=pruned,
        seconds=time.perf_counter() - t0,
    )
    if correct is not None:
        result.correct_target_rank = n if result.unscorable else worst_case_rank(scores, correct)
        # pruned targets score below the final floor, so they can only outrank a correct target below it
        result.rank_exact = not (pruned.any() and scores[correct] < top.floor)
    return result


# -- metrics --------------------------------------------------------------------


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank.

    >>> round(mrr([1, 2, 4]), 5)
    0.58333
    """
    r = np.asarray(ranks, dtype=float)
    if r.size == 0:
        raise ValueError("empty rank list")
    if np.any(r < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.mean(1.0 / r))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score threshold for each point after the first

    def auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2))

    def points(self) -> list[list[float]]:
        return [[float(f), float(t)] for f, t in zip(self.fpr, self.tpr)]

    def write_csv(self, fh, log_fpr: bool = False) -> None:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"] + (["log10_fpr"] if log_fpr else []))
        for f, t in zip(self.fpr, self.tpr):
            row = [repr(float(f)), repr(float(t))]
            if log_fpr:
                row.append(repr(math.log10(f)) if f > 0 else "")
            w.writerow(row)

    def to_csv(self, path, log_fpr: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            self.write_csv(fh, log_fpr)


def roc(correct_scores: Sequence[float], other_scores: Sequence[float]) -> RocCurve:
    """ROC from a threshold sweep over the pooled scores of all queries.

    A score counts as a detection when it is >= the threshold.
    """
    pos = np.asarray(correct_scores, dtype=float)
    neg = np.asarray(other_scores, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative score")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise ValueError("scores must not be NaN")
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    ps, ns = np.sort(pos), np.sort(neg)
    tpr = (pos.size - np.searchsorted(ps, thr, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(ns, thr, side="left")) / neg.size
    fpr = np.concatenate([[0.0], fpr, [1.0]])
    tpr = np.concatenate([[0.0], tpr, [1.0]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thr)


def summarize(ranks: Sequence[int], correct_scores=None, other_scores=None) -> dict:
    out = {
        "n_queries": len(ranks),
        "mrr": round(mrr(ranks), 4),
        "median_rank": float(np.median(ranks)),
        "mean_rank": float(np.mean(ranks)),
    }
    if correct_scores is not None and other_scores is not None:
        curve = roc(correct_scores, other_scores)
        out["roc"] = curve.points()
        out["roc_auc"] = curve.auc()
    return out


# -- entropy --------------------------------------------------------------------


def gaussian_differential_entropy(variance: float) -> float:
    """Differential entropy (nats) of a normal with the given variance."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    return 0.5 * (math.log(2 * math.pi * variance) + 1)


def discrete_entropy(dist: Sequence[float]) -> float:
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("not a probability distribution")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def discretized_normal(variance: float = 1.0, half_width: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """(support, probabilities) of a zero-mean normal on integers ``-half_width..half_width``."""
    x = np.arange(-half_width, half_width + 1)
    return x, discrete_normal(x, math.sqrt(variance))


def convolve(p_support, p, q_support, q) -> tuple[np.ndarray, np.ndarray]:
    """Distribution of X + Y for independent integer-valued X ~ p, Y ~ q."""
    p_support, q_support = np.asarray(p_support), np.asarray(q_support)
    z = np.convolve(p, q)
    start = p_support[0] + q_support[0]
    return np.arange(start, start + len(z)), z


def variance(support, dist) -> float:
    x, p = np.asarray(support, dtype=float), np.asarray(dist, dtype=float)
    mu = float(np.sum(x * p))
    return float(np.sum((x - mu) ** 2 * p))
