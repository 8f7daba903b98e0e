import itertools

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from slabserve.batching import (
    CostModel,
    Request,
    fcfs_batch,
    max_ontime_exhaustive,
    moore_hodgson,
    predict_ttft,
    schedule_batch,
    serve_sequentially,
)

COST = CostModel(alpha=0.01, beta=1e-4)


def req(i, prompt, deadline, arrival=0.0):
    return Request(i, "m", arrival, prompt, 1, deadline)


class TestCostModel:
    def test_one_chunk(self):
        assert predict_ttft([req(0, 500, 1.0)], COST, 1000) == pytest.approx(0.06)

    def test_minimal_batch(self):
        assert predict_ttft([req(0, 1, 1.0)], COST, 1000) == pytest.approx(0.01 + 1e-4)

    def test_two_chunks(self):
        assert predict_ttft([req(0, 1000, 9), req(1, 500, 9)], COST, 1000) == pytest.approx(0.02 + 0.15)

    def test_zero_tokens(self):
        with pytest.raises(ValueError):
            COST.prefill_time(0, 100)
        with pytest.raises(ValueError):
            predict_ttft([], COST, 100)

    def test_rejects_bad_coefficients(self):
        with pytest.raises(ValueError):
            CostModel(alpha=0.0, beta=0.0)
        with pytest.raises(ValueError):
            CostModel(alpha=float("nan"), beta=1.0)

    def test_decode_time(self):
        c = CostModel(0, 1, gamma=0.01, delta=0.001, epsilon=1e-6)
        assert c.decode_time(4, 1000) == pytest.approx(0.01 + 0.004 + 0.001)

    @given(a=st.integers(1, 10_000), b=st.integers(1, 10_000), t_max=st.integers(1, 4096))
    def test_monotone(self, a, b, t_max):
        lo, hi = sorted((a, b))
        assert COST.prefill_time(lo, t_max) <= COST.prefill_time(hi, t_max)


class TestRequest:
    def test_validation(self):
        with pytest.raises(ValueError):
            Request(0, "m", 0.0, 0, 1, 1.0)
        with pytest.raises(ValueError):
            Request(0, "m", 1.0, 5, 1, 1.0)

    def test_with_slo(self):
        assert Request.with_slo(0, "m", 2.0, 5, 1, 0.5).deadline == 2.5


class TestScheduleBatch:
    def test_single_feasible(self):
        d = schedule_batch([req(0, 100, 10.0)], 0.0, COST, 8, 1000)
        assert d.admitted_ids == [0] and not d.dropped

    def test_infeasible_dropped(self):
        d = schedule_batch([req(0, 100, 0.015)], 0.0, COST, 8, 1000)
        assert d.dropped_ids == [0] and not d.admitted

    def test_longer_deferred(self):
        # together: 0.01 + 0.1 = 0.11 misses the 0.05 anchor; the short one alone takes 0.02
        a, b = req(0, 100, 0.05), req(1, 900, 0.2)
        d = schedule_batch([a, b], 0.0, COST, 8, 1000)
        assert d.admitted_ids == [0] and d.deferred_ids == [1]
        # admitting both would miss the anchor deadline
        assert predict_ttft([a, b], COST, 1000) >= a.deadline
        # brute force over all subsets: {a} is the only one that keeps its own anchor
        def anchored(sub):
            sub = sorted(sub, key=lambda r: r.deadline)
            return predict_ttft(sub, COST, 1000) < sub[0].deadline
        ok = [s for n in (1, 2) for s in itertools.combinations([a, b], n) if anchored(s)]
        assert max(ok, key=len) == (a,)

    def test_anchor_evicted_when_longest(self):
        # the front request is itself the longest; evicting it makes the next one the anchor
        a, b = req(0, 900, 0.2), req(1, 100, 0.21)
        c = req(2, 100, 0.22)
        d = schedule_batch([a, b, c], 0.0, CostModel(alpha=0.0, beta=2e-4), 8, 2000)
        assert 0 in d.deferred_ids
        assert d.admitted_ids == [1, 2]

    def test_trim_from_back(self):
        rs = [req(i, 10, 1.0 + i) for i in range(5)]
        d = schedule_batch(rs, 0.0, COST, 3, 1000)
        assert d.admitted_ids == [0, 1, 2]
        assert sorted(d.deferred_ids) == [3, 4]

    def test_token_cap(self):
        rs = [req(i, 400, 1.0 + i) for i in range(3)]
        d = schedule_batch(rs, 0.0, COST, 8, 1000)
        assert d.admitted_ids == [0, 1]

    def test_chunk_size_separate_from_cap(self):
        rs = [req(0, 600, 0.5)]
        fine = schedule_batch(rs, 0.0, COST, 8, 1000, chunk_tokens=100)
        assert fine.predicted_ttft == pytest.approx(6 * 0.01 + 0.06)

    def test_log_record(self):
        d = schedule_batch([req(0, 100, 1.0), req(1, 100, 0.001)], 0.25, COST, 8, 1000)
        rec = d.log_record("m")
        assert rec["tick"] == 0.25 and rec["admitted"] == [0] and rec["dropped"] == [1]
        assert rec["anchor_deadline"] == 1.0
        assert schedule_batch([], 0.0, COST, 8, 1000).log_record("m")["anchor_deadline"] is None

    @given(
        data=st.lists(st.tuples(st.integers(1, 600), st.floats(0.001, 0.3)), min_size=0, max_size=15),
        n_max=st.integers(0, 6),
        t_max=st.integers(1, 2000),
        now=st.floats(0, 0.05),
    )
    def test_properties(self, data, n_max, t_max, now):
        waiting = [req(i, p, now + slack, arrival=now - 0.01) for i, (p, slack) in enumerate(data)]
        d = schedule_batch(waiting, now, COST, n_max, t_max)
        ids = lambda rs: [r.request_id for r in rs]  # noqa: E731
        # partition of the waiting set
        assert sorted(ids(d.admitted) + ids(d.dropped) + ids(d.deferred)) == list(range(len(waiting)))
        # drop soundness
        for r in d.dropped:
            assert now + COST.prefill_time(r.prompt_tokens, t_max) >= r.deadline
        # deferred requests are the original objects, unchanged
        for r in d.deferred:
            assert r is waiting[r.request_id]
        if d.admitted:
            # anchor guarantee
            assert now + predict_ttft(d.admitted, COST, t_max) < d.admitted[0].deadline
            # EDF order and caps
            dl = [r.deadline for r in d.admitted]
            assert dl == sorted(dl)
            assert len(d.admitted) <= n_max
            assert sum(r.prompt_tokens for r in d.admitted) <= t_max


class TestFcfs:
    def test_arrival_order_and_head_of_line(self):
        rs = [req(0, 300, 9, arrival=0.0), req(1, 900, 9, arrival=0.1), req(2, 10, 9, arrival=0.2)]
        d = fcfs_batch(rs, 1.0, COST, 8, 1000)
        assert d.admitted_ids == [0] and d.deferred_ids == [1, 2] and not d.dropped

    def test_never_drops(self):
        d = fcfs_batch([req(0, 100, 0.001)], 5.0, COST, 8, 1000)
        assert d.admitted_ids == [0] and not d.dropped


class TestMooreHodgson:
    def test_examples(self):
        assert moore_hodgson([(2, 3), (2, 4)]) == 1
        assert moore_hodgson([(2, 3), (2, 5)]) == 2
        assert moore_hodgson([]) == 0

    def test_no_tardiness(self):
        jobs = [(1, 100), (2, 100), (3, 100)]
        assert moore_hodgson(jobs) == 3

    def test_strict_deadline(self):
        assert moore_hodgson([(2, 2)]) == 0
        assert max_ontime_exhaustive([(2, 2)]) == 0

    @given(
        jobs=st.lists(st.tuples(st.floats(0.01, 5), st.floats(0.01, 15)), max_size=10),
        start=st.floats(0, 2),
    )
    def test_matches_exhaustive(self, jobs, start):
        assert moore_hodgson(jobs, start) == max_ontime_exhaustive(jobs, start)


class TestSequential:
    def test_feasible_all(self):
        rs = [req(i, 100, 1.0 + i) for i in range(4)]
        assert serve_sequentially(rs, COST, 1000) == 4

    @given(st.lists(st.tuples(st.integers(16, 512), st.floats(0.0, 0.08)), min_size=1, max_size=12))
    def test_never_beats_optimum(self, data):
        rs = [req(i, p, round(0.08 - a, 6), arrival=-a) for i, (p, a) in enumerate(data)]
        assume(all(r.deadline > r.arrival_time for r in rs))
        cost = CostModel(alpha=0.02, beta=1e-4)
        jobs = [(cost.prefill_time(r.prompt_tokens, 512), r.deadline) for r in rs]
        assert serve_sequentially(rs, cost, 512) <= max_ontime_exhaustive(jobs) == moore_hodgson(jobs)
