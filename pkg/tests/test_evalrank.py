import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_events
from melmatch.evalrank import (
    convolve,
    discrete_entropy,
    discretized_normal,
    gaussian_differential_entropy,
    mrr,
    prepare_database,
    rank_database,
    roc,
    summarize,
    variance,
    worst_case_rank,
)
from melmatch.events import QuantizedEvent
from melmatch.params import apply_variant, default_params
from melmatch.simulate import moderate_error_params, sample_query


class TestWorstCaseRank:
    def test_three_way_tie(self):
        assert worst_case_rank([0.5, 0.5, 0.5], 0) == 3
        assert worst_case_rank([0.5, 0.5, 0.5], 2) == 3

    def test_strictly_best(self):
        assert worst_case_rank([-1.0, -3.0, -2.0], 0) == 1
        assert worst_case_rank([-1.0, -3.0, -2.0], 1) == 3

    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.randoms())
    def test_permuting_ties_never_changes_rank(self, scores, rnd):
        correct = rnd.randrange(len(scores))
        perm = list(range(len(scores)))
        rnd.shuffle(perm)
        shuffled = [scores[i] for i in perm]
        assert worst_case_rank(shuffled, perm.index(correct)) == worst_case_rank(scores, correct)
        assert worst_case_rank(scores, correct) == 1 + sum(s >= scores[correct] for i, s in enumerate(scores) if i != correct)


class TestMrr:
    def test_examples(self):
        assert mrr([1, 1, 1]) == 1.0
        assert mrr([1, 2, 4]) == pytest.approx(0.58333, abs=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            mrr([])
        with pytest.raises(ValueError):
            mrr([0, 1])

    def test_summary_four_decimals(self):
        s = summarize([1, 2, 4, 1])
        assert s["mrr"] == 0.6875 and s["median_rank"] == 1.5


class TestRoc:
    def test_perfect_separation(self):
        c = roc([5.0, 6.0], [1.0, 2.0, 3.0])
        assert [0.0, 1.0] in c.points()
        assert c.auc() == pytest.approx(1.0)

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(0)
        c = roc(rng.normal(1, 1, 50), rng.normal(0, 1, 500))
        assert c.points()[0] == [0.0, 0.0] and c.points()[-1] == [1.0, 1.0]
        assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)

    def test_same_distribution_is_near_diagonal(self):
        rng = np.random.default_rng(1)
        c = roc(rng.normal(size=2000), rng.normal(size=2000))
        assert c.auc() == pytest.approx(0.5, abs=0.03)
        assert np.abs(c.tpr - c.fpr).max() < 0.06

    def test_single_false_positive_rate(self):
        # with 10^4 negatives, one negative above every positive gives FPR 1e-4 at TPR 1
        neg = np.zeros(10**4)
        neg[0] = 10.0
        c = roc([5.0], neg)
        assert [1e-4, 1.0] in c.points()

    def test_csv_with_log_fpr(self):
        c = roc([2.0, 1.0], [0.0, 1.5])
        buf = io.StringIO()
        c.write_csv(buf, log_fpr=True)
        rows = buf.getvalue().strip().splitlines()
        assert rows[0] == "fpr,tpr,log10_fpr"
        assert rows[1] == "0.0,0.0,"
        assert rows[-1].startswith("1.0,1.0,0.0")

    def test_errors(self):
        with pytest.raises(ValueError):
            roc([], [1.0])
        with pytest.raises(ValueError):
            roc([np.nan], [1.0])


class TestEntropy:
    def test_gaussian_anchors(self):
        assert gaussian_differential_entropy(1.0) == pytest.approx(1.42, abs=0.01)
        assert gaussian_differential_entropy(2.0) == pytest.approx(1.77, abs=0.01)
        assert gaussian_differential_entropy(2.0) - gaussian_differential_entropy(1.0) == pytest.approx(0.5 * math.log(2))
        with pytest.raises(ValueError):
            gaussian_differential_entropy(0.0)

    def test_discrete(self):
        assert discrete_entropy([0, 1, 0]) == 0.0
        assert discrete_entropy(np.full(12, 1 / 12)) == pytest.approx(math.log(12))
        with pytest.raises(ValueError):
            discrete_entropy([0.5, 0.6])

    def test_convolution_variance_and_entropy(self):
        x, p = discretized_normal(1.0)
        z, pz = convolve(x, p, x, p)
        assert variance(z, pz) == pytest.approx(2.0, rel=0.02)
        assert pz.sum() == pytest.approx(1.0)
        assert discrete_entropy(pz) >= discrete_entropy(p)
        assert z[0] == -24 and z[-1] == 24

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.01, 1), min_size=1, max_size=6), st.lists(st.floats(0.01, 1), min_size=1, max_size=6))
    def test_sum_entropy_law(self, a, b):
        a, b = np.array(a) / sum(a), np.array(b) / sum(b)
        _, c = convolve(np.arange(len(a)), a, np.arange(len(b)), b)
        assert discrete_entropy(c / c.sum()) >= max(discrete_entropy(a), discrete_entropy(b)) - 1e-9


def small_database(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return [random_events(rng, int(rng.integers(15, 25)), True) for _ in range(n)]


class TestRankDatabase:
    def test_exact_match_ranks_first(self):
        p = moderate_error_params()
        db = small_database()
        q = db[5][3:11]
        res = rank_database(p, db, q, correct=5)
        assert res.correct_target_rank == 1 and res.top[0][0] == 5
        assert len(res.top) == 10 and [r["rank"] for r in res.json_lines()] == list(range(1, 11))

    def test_full_order_is_consistent_with_scores(self):
        p = moderate_error_params()
        db = small_database()
        q = sample_query(db[2], p, 4, 9, seed=1).query
        res = rank_database(p, db, q, k=len(db))
        ids = [t for t, _ in res.top]
        assert sorted(ids) == list(range(len(db)))
        s = [res.scores[t] for t in ids]
        assert s == sorted(s, reverse=True)

    @pytest.mark.parametrize("alignment", ["max", "first"])
    def test_pruned_top_k_equals_unpruned(self, alignment):
        p = moderate_error_params()
        db = prepare_database(small_database(20, 1), p)
        for j in range(4):
            tid = 3 * j
            # start at the first note so the "first" alignment can score the correct target
            q = sample_query(db[tid].model, p, 1, 8, seed=j).query
            plain = rank_database(p, db, q, k=5, method="viterbi", alignment=alignment, correct=tid)
            fast = rank_database(p, db, q, k=5, method="viterbi", prune=True, alignment=alignment, correct=tid)
            assert fast.top == plain.top
            assert fast.correct_target_rank == plain.correct_target_rank and fast.rank_exact

    def test_threads_match_single_thread(self):
        p = moderate_error_params()
        db = prepare_database(small_database(10, 2), p)
        q = sample_query(db[4].model, p, 1, 8, seed=3).query
        a = rank_database(p, db, q, k=10)
        b = rank_database(p, db, q, k=10, threads=3)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert a.top == b.top

    def test_ties_break_by_target_id(self):
        p = default_params()
        t = small_database(1)[0]
        res = rank_database(p, [t, t, t], t[:6], k=2, correct=1)
        assert [tid for tid, _ in res.top] == [0, 1]
        assert res.correct_target_rank == 3

    def test_unscorable(self):
        p = apply_variant(apply_variant(default_params(), "local"), "cumulative")
        db = [[QuantizedEvent(0, 16, 480.0)]] * 3
        q = [QuantizedEvent(0, 16, 480.0), QuantizedEvent(5, 2, 40.0)]
        res = rank_database(p, db, q, correct=0)
        assert res.unscorable and res.correct_target_rank == 3
        assert res.json_lines()[0]["log_likelihood"] is None

    def test_errors(self):
        p = default_params()
        db = small_database(2)
        with pytest.raises(ValueError, match="empty database"):
            rank_database(p, [], db[0])
        with pytest.raises(ValueError, match="pruning needs viterbi"):
            rank_database(p, db, db[0][:4], prune=True)
        with pytest.raises(ValueError, match="unknown method"):
            rank_database(p, db, db[0][:4], method="dtw")
        with pytest.raises(ValueError, match="unknown alignment"):
            rank_database(p, db, db[0][:4], alignment="last")
