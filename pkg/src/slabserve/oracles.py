"""Randomized drivers and independent reference implementations.

These back both ``slabserve selftest`` and the test suite: an allocator
fuzzer checked op-by-op against the whole-slab reference replay, random
single-machine batching instances, and a step-by-step re-execution of the
greedy placement loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .batching import CostModel, Request, max_ontime_exhaustive, moore_hodgson, serve_sequentially
from .errors import InvalidFreeError, PoolExhaustedError
from .precision import base_footprint, estimate_mme, expand_replicas
from .slab import SlabPoolConfig, SlabTable, decode_block_id, lcm_of

# -- allocator fuzz ---------------------------------------------------------------


@dataclass
class FuzzReport:
    n_ops: int
    n_allocs: int
    n_failed_allocs: int
    n_frees: int
    conservation_failures: int
    oracle_mismatches: int
    id_mismatches: int
    exhaustion_mismatches: int
    verify_failures: int
    first_problem: str | None = None

    @property
    def ok(self) -> bool:
        return not (
            self.conservation_failures
            or self.oracle_mismatches
            or self.id_mismatches
            or self.exhaustion_mismatches
            or self.verify_failures
        )


def fuzz_allocator(
    n_ops: int = 100_000,
    seed: int = 0,
    keys=(3 << 16, 4 << 16, 6 << 16),
    n_slabs: int = 48,
    slab_multiplier: int = 2,
    verify_every: int = 25_000,
    corrupt_at: int | None = None,
) -> FuzzReport:
    """Drive a :class:`SlabTable` with random alloc/free traffic.

    The alloc probability alternates between a filling and a draining regime
    so the pool repeatedly hits exhaustion.  Every op is then replayed on the
    reference allocator and compared: chosen slab, all four byte accounts,
    and whether an alloc failed.  ``corrupt_at`` flips one bitmap bit at
    that op to exercise the negative path.
    """
    keys = tuple(sorted(keys))
    slab = lcm_of(keys) * slab_multiplier
    table = SlabTable(SlabPoolConfig(n_slabs * slab, slab, set(keys)))
    usable = table.usable_bytes
    bps = [table.blocks_per_slab(k) for k in keys]
    rng = np.random.default_rng(seed)
    key_idx = rng.integers(0, len(keys), size=n_ops)
    coin = rng.random(n_ops)
    pick = rng.random(n_ops)
    regime = (np.arange(n_ops) // 4096) % 2  # 0 fill, 1 drain
    p_alloc = np.where(regime == 0, 0.7, 0.35)

    kinds = np.zeros(n_ops, dtype=np.int8)
    target = np.full(n_ops, -1, dtype=np.int64)
    slab_of = np.full(n_ops, -1, dtype=np.int64)
    acct = np.zeros((4, n_ops), dtype=np.int64)
    # live handles and the op index that created each
    live: list = []
    live_op: list[int] = []
    live_key: list[int] = []
    report = FuzzReport(n_ops, 0, 0, 0, 0, 0, 0, 0, 0)

    for i in range(n_ops):
        if corrupt_at is not None and i == corrupt_at and live:
            h = live[0]
            table._debug_flip_bit(h.slab_id, h.local_block_id)
        if live and coin[i] >= p_alloc[i]:
            j = int(pick[i] * len(live))
            h = live[j]
            kinds[i] = kernels.OP_FREE
            target[i] = live_op[j]
            key_idx[i] = live_key[j]
            live[j], live_op[j], live_key[j] = live[-1], live_op[-1], live_key[-1]
            live.pop(), live_op.pop(), live_key.pop()
            try:
                table.free(h)
            except InvalidFreeError as exc:
                report.verify_failures += 1
                report.first_problem = report.first_problem or f"op {i}: {exc}"
            slab_of[i] = h.slab_id
            report.n_frees += 1
        else:
            k = int(key_idx[i])
            kinds[i] = kernels.OP_ALLOC
            report.n_allocs += 1
            try:
                h = table.alloc(keys[k])
            except PoolExhaustedError:
                report.n_failed_allocs += 1
            else:
                slab_of[i] = h.slab_id
                b = bps[k]
                if h.global_block_id != h.slab_id * b + h.local_block_id or decode_block_id(h.global_block_id, b) != (
                    h.slab_id,
                    h.local_block_id,
                ):
                    report.id_mismatches += 1
                    report.first_problem = report.first_problem or f"op {i}: block id {h}"
                live.append(h)
                live_op.append(i)
                live_key.append(k)
        acct[0, i] = table.allocated_bytes
        acct[1, i] = table.free_block_bytes
        acct[2, i] = table.residue_bytes
        acct[3, i] = table.free_slab_bytes
        if verify_every and (i + 1) % verify_every == 0:
            try:
                table.verify()
            except AssertionError as exc:
                report.verify_failures += 1
                report.first_problem = report.first_problem or f"op {i}: {exc}"
    try:
        table.verify()
    except AssertionError as exc:
        report.verify_failures += 1
        report.first_problem = report.first_problem or f"end: {exc}"

    bad = np.flatnonzero(acct.sum(axis=0) != usable)
    report.conservation_failures = int(bad.size)
    if bad.size:
        report.first_problem = report.first_problem or f"op {bad[0]}: bytes do not sum to capacity"

    placed, a, fb, rs, fs, first_error = kernels.whole_slab_replay(
        kinds, key_idx, target, n_slabs, bps, list(keys), slab
    )
    if first_error >= 0:
        report.oracle_mismatches += 1
        report.first_problem = report.first_problem or f"op {first_error}: reference rejects the free"
    mism = (placed != slab_of) | (a != acct[0]) | (fb != acct[1]) | (rs != acct[2]) | (fs != acct[3])
    report.oracle_mismatches += int(mism.sum())
    if mism.any():
        report.first_problem = report.first_problem or f"op {int(np.flatnonzero(mism)[0])}: differs from reference"

    # an alloc may fail only when no slab of its key has room and no slab is free
    failed = (kinds == kernels.OP_ALLOC) & (slab_of < 0)
    for i in np.flatnonzero(failed).tolist():
        if acct[3, i] != 0:
            report.exhaustion_mismatches += 1
            report.first_problem = report.first_problem or f"op {i}: alloc failed with free slabs left"
    return report


# -- batching instances -------------------------------------------------------------

DEFAULT_BATCH_COST = CostModel(alpha=0.02, beta=1e-4)
DEFAULT_BATCH_TMAX = 512
DEFAULT_BATCH_SLO = 0.08


def random_batch_instance(rng, max_requests=12, cost=DEFAULT_BATCH_COST, t_max=DEFAULT_BATCH_TMAX,
                          slo=DEFAULT_BATCH_SLO) -> list[Request]:
    """Up to ``max_requests`` already-waiting requests at ``now = 0``."""
    n = int(rng.integers(1, max_requests + 1))
    out = []
    for i in range(n):
        prompt = int(rng.integers(16, 513))
        arrival = float(rng.uniform(-slo, 0.0))
        out.append(Request(i, "m", arrival, prompt, 1, arrival + slo))
    return out


@dataclass
class BatchComparison:
    adaptive: int
    moore_hodgson: int
    exhaustive: int


def compare_batching(requests, cost=DEFAULT_BATCH_COST, t_max=DEFAULT_BATCH_TMAX) -> BatchComparison:
    jobs = [(cost.prefill_time(r.prompt_tokens, t_max), r.deadline) for r in requests]
    return BatchComparison(
        adaptive=serve_sequentially(requests, cost, t_max),
        moore_hodgson=moore_hodgson(jobs),
        exhaustive=max_ontime_exhaustive(jobs),
    )


# -- placement re-execution -----------------------------------------------------------


def naive_placement(models, groups, slopes=None) -> dict[str, str]:
    """Re-run the greedy loop directly from the definitions.

    Footprints are recomputed from scratch for every group and candidate, and
    all arithmetic is plain Python.  Returns ``{model_id: group_id}``.
    """
    expanded = expand_replicas(models)
    fp = {m.model_id: base_footprint(m) for m in expanded}
    mu = {m.model_id: estimate_mme(m, None, slopes).tokens_per_byte for m in expanded}
    residents = {g.group_id: [] for g in groups}
    out = {}
    for m in sorted(expanded, key=lambda x: (-fp[x.model_id], x.model_id)):
        best_gid, best_score = None, None
        for g in sorted(groups, key=lambda x: x.group_id):
            if len(g.member_gpus) != m.tp_degree:
                continue
            k_rem = g.total_memory - sum(fp[r] for r in residents[g.group_id]) - fp[m.model_id]
            if k_rem < 0:
                continue
            members = residents[g.group_id] + [m.model_id]
            score = sum(mu[r] for r in members) / len(members) * k_rem
            if best_score is None or score > best_score:
                best_gid, best_score = g.group_id, score
        if best_gid is None:
            raise ValueError(f"{m.model_id} fits nowhere")
        residents[best_gid].append(m.model_id)
        out[m.model_id] = best_gid
    return out


_PRECISIONS = ("W16A16KV16", "W8A8KV8", "W4A16KV16", "W4A8KV4")


def random_placement_instance(rng, max_models=3, max_groups=2):
    """Small random (models, groups) pair where every model fits some group alone."""
    from .placement import GpuGroup
    from .precision import ModelProfile, PrecisionSpec

    gib = 1 << 30
    n_groups = int(rng.integers(1, max_groups + 1))
    groups = []
    gpu = 0
    for g in range(n_groups):
        size = int(rng.choice([1, 1, 2]))
        groups.append(GpuGroup(f"g{g}", [f"gpu{gpu + i}" for i in range(size)], int(rng.integers(24, 81)) * gib))
        gpu += size
    tps = sorted({g.tp_degree for g in groups})
    models = []
    for i in range(int(rng.integers(1, max_models + 1))):
        tp = int(rng.choice(tps))
        room = max(g.total_memory for g in groups if g.tp_degree == tp)
        weight = int(rng.uniform(0.1, 0.6) * room) * tp
        models.append(
            ModelProfile(
                model_id=f"m{i}",
                precision=PrecisionSpec.parse(str(rng.choice(_PRECISIONS))),
                num_kv_heads=8,
                head_dim=128,
                num_layers=int(rng.choice([16, 32, 40, 80])),
                tp_degree=tp,
                tokens_per_block=int(rng.choice([8, 16, 32])),
                quant_param_bytes_per_block=int(rng.choice([0, 0, 256])),
                weight_bytes=weight,
                avg_activation_bytes=int(rng.uniform(0.01, 0.05) * room),
                avg_kv_bytes={1: int(rng.uniform(0.0, 0.02) * room), 8: int(rng.uniform(0.02, 0.1) * room)},
                request_rate=float(rng.uniform(0.5, 6.0)),
                ttft_slo=1.0,
                cost=CostModel(alpha=0.005, beta=1e-4),
                throughput_table={1: 2.0, 8: 8.0},
            )
        )
    return models, groups
