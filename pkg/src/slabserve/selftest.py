"""Built-in oracle suites run by ``slabserve selftest``."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import kernels
from .batching import Request, max_ontime_exhaustive, serve_sequentially
from .errors import SlabServeError
from .oracles import (
    DEFAULT_BATCH_COST,
    DEFAULT_BATCH_TMAX,
    compare_batching,
    fuzz_allocator,
    naive_placement,
    random_batch_instance,
    random_placement_instance,
)
from .placement import place_models
from .slab import SlabPoolConfig, SlabTable, read_oplog


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _replay_oplog(records, config) -> SlabTable:
    """Rebuild a table by re-applying a recorded op log."""
    table = SlabTable(config)
    live = {}
    for rec in records:
        if rec["op"] == "alloc":
            h = table.alloc(rec["key"])
            if (h.slab_id, h.local_block_id, h.global_block_id) != (rec["slab_id"], rec["local_id"], rec["global_id"]):
                raise AssertionError(f"replay placed block {h} where the log has {rec}")
            live[rec["global_id"], rec["key"]] = h
        else:
            table.free(live.pop((rec["global_id"], rec["key"])))
    return table


def allocator_suite(seed: int = 0, inject_corruption: bool = False) -> SuiteResult:
    n_ops = 20_000
    report = fuzz_allocator(n_ops, seed=seed, corrupt_at=n_ops // 4 if inject_corruption else None,
                            verify_every=1_000)
    if not report.ok:
        return SuiteResult("allocator", False, report.first_problem or "fuzz failed")

    # op-log round trip: replaying the exported ledger rebuilds an equal table
    keys = {3 << 10, 4 << 10, 6 << 10}
    cfg = SlabPoolConfig(24 * (12 << 10), 12 << 10, keys)
    table = SlabTable(cfg, record_ops=True)
    rng = np.random.default_rng(seed)
    live = []
    for _ in range(2_000):
        if live and rng.random() < 0.45:
            table.free(live.pop(int(rng.integers(len(live)))))
        else:
            try:
                live.append(table.alloc(int(rng.choice(sorted(keys)))))
            except SlabServeError:
                pass
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ops.jsonl")
        table.export_oplog(path)
        try:
            rebuilt = _replay_oplog(read_oplog(path), cfg)
        except (AssertionError, SlabServeError) as exc:
            return SuiteResult("allocator", False, f"op-log replay: {exc}")
    if rebuilt != table:
        return SuiteResult("allocator", False, "op-log replay produced a different table")
    return SuiteResult(
        "allocator",
        True,
        f"{n_ops} fuzz ops ({report.n_failed_allocs} exhaustion failures) match the reference; "
        f"op-log replay identical",
    )


def batching_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    n = 200
    disagree = 0
    for _ in range(n):
        c = compare_batching(random_batch_instance(rng))
        if c.moore_hodgson != c.exhaustive:
            disagree += 1
    if disagree:
        return SuiteResult("batching", False, f"Moore-Hodgson differs from the subset optimum on {disagree}/{n}")
    # a fixed 12-request instance (already waiting at t=0, 80 ms SLO)
    cost = DEFAULT_BATCH_COST
    prompts = [492, 466, 69, 64, 292, 32, 506, 357, 359, 311, 380, 405]
    arrivals = [-0.079, -0.032, -0.01, -0.003, -0.069, -0.013, -0.001, -0.019, -0.037, -0.079, -0.049, -0.071]
    reqs = [Request(i, "m", a, p, 1, round(a + 0.08, 3)) for i, (p, a) in enumerate(zip(prompts, arrivals))]
    jobs = [(cost.prefill_time(r.prompt_tokens, DEFAULT_BATCH_TMAX), r.deadline) for r in reqs]
    got, best = serve_sequentially(reqs, cost, DEFAULT_BATCH_TMAX), max_ontime_exhaustive(jobs)
    if got != best:
        return SuiteResult("batching", False, f"12-request instance: {got} on time, optimum {best}")
    return SuiteResult("batching", True, f"Moore-Hodgson equals the subset optimum on {n}/{n}; "
                                         f"12-request instance {got}/{best}")


def placement_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    checked = 0
    while checked < 100:
        models, groups = random_placement_instance(rng)
        try:
            want = naive_placement(models, groups)
        except (ValueError, SlabServeError):
            try:
                place_models(models, groups)
            except SlabServeError:
                continue
            return SuiteResult("placement", False, "placement succeeded where re-execution found no fit")
        got = place_models(models, groups).assignments
        if got != want:
            return SuiteResult("placement", False, f"{json.dumps(got)} != {json.dumps(want)}")
        checked += 1
    return SuiteResult("placement", True, f"{checked} random instances match step-by-step re-execution")


def run_selftest(seed: int = 0, inject_corruption: bool = False) -> list[SuiteResult]:
    results = []
    for fn, kw in (
        (allocator_suite, {"inject_corruption": inject_corruption}),
        (batching_suite, {}),
        (placement_suite, {}),
    ):
        try:
            results.append(fn(seed=seed, **kw))
        except Exception as exc:  # a crash is a failed suite, not a crashed CLI
            results.append(SuiteResult(fn.__name__.replace("_suite", ""), False, f"{type(exc).__name__}: {exc}"))
    results.append(SuiteResult("backend", True, kernels.backend()))
    return results
