import numpy as np

from slabserve.oracles import compare_batching, fuzz_allocator, random_batch_instance
from slabserve.selftest import allocator_suite, batching_suite, placement_suite, run_selftest


def test_all_suites_pass():
    results = run_selftest(seed=1)
    assert [r.name for r in results] == ["allocator", "batching", "placement", "backend"]
    assert all(r.passed for r in results), [r.line() for r in results]


def test_corruption_detected():
    r = allocator_suite(seed=0, inject_corruption=True)
    assert not r.passed and r.line().startswith("FAIL")


def test_fuzz_report_counts():
    rep = fuzz_allocator(30_000, seed=5)
    assert rep.ok
    assert rep.n_allocs + rep.n_frees == rep.n_ops
    # the fill/drain regimes must actually reach exhaustion
    assert rep.n_failed_allocs > 0


def test_fuzz_corruption_flags_problem():
    rep = fuzz_allocator(10_000, seed=0, corrupt_at=2_500, verify_every=500)
    assert not rep.ok and rep.first_problem


def test_batch_comparison_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = compare_batching(random_batch_instance(rng))
        assert c.adaptive <= c.exhaustive == c.moore_hodgson


def test_other_suites():
    assert batching_suite(seed=3).passed
    assert placement_suite(seed=3).passed
