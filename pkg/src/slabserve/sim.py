"""Deterministic discrete-event simulator of mixed-precision serving.

Each GPU group is one time-multiplexed device: at every device tick the
next engine in round-robin order with work runs either one prefill batch
(all chunks back to back) or one decode step.  KV memory is drawn from a
single :class:`~slabserve.slab.SlabTable` per group (``dynamic``) or from a
private table per model sized in proportion to its base footprint
(``static``).
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .batching import BatchDecision, Request, fcfs_batch, schedule_batch
from .errors import InvalidMeasurementError, InvalidScenarioError, PoolExhaustedError
from .placement import GpuGroup, PlacementPlan
from .precision import ModelProfile, base_footprint, kv_block_size, operating_batch
from .slab import SlabPoolConfig, SlabTable, auto_slab_size
from .workload import TraceRecord, WorkloadSpec, generate_workload

MODES = ("dynamic", "static")
POLICIES = ("adaptive", "fcfs")
METRICS_SCHEMA = "slabserve.metrics/1"


@dataclass(frozen=True)
class Phase:
    name: str
    start: float
    end: float


@dataclass
class SimConfig:
    mode: str = "dynamic"
    policy: str = "adaptive"
    slab_multiplier: int = 1
    slab_size_bytes: int | None = None
    # per-group KV pool override; default is memory left after weights and
    # activations of the residents
    kv_pool_bytes: Mapping[str, int] | int | None = None
    sample_interval: float = 1.0
    max_time: float | None = None
    phases: Sequence[Phase] = ()
    measure_window: tuple[float, float] | None = None
    check_invariants: bool = False
    record_decisions: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.policy not in POLICIES:
            raise InvalidScenarioError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.slab_multiplier < 1:
            raise InvalidScenarioError("slab multiplier must be >= 1")
        if not self.sample_interval > 0:
            raise InvalidScenarioError("sample_interval must be > 0")


# -- engine state ---------------------------------------------------------------


class _Running:
    __slots__ = ("req", "generated", "blocks", "first_token")

    def __init__(self, req, blocks):
        self.req = req
        self.generated = 0
        self.blocks = blocks
        self.first_token = None

    @property
    def tokens(self):
        return self.req.prompt_tokens + self.generated


class EngineState:
    """One model replica bound to a GPU group."""

    def __init__(self, profile: ModelProfile, group_id: str, table: SlabTable, capacity: int):
        self.profile = profile
        self.model_id = profile.model_id
        self.group_id = group_id
        self.table = table
        self.capacity = capacity
        self.key = kv_block_size(profile)
        self.tpb = profile.tokens_per_block
        self.avg_blocks = profile.blocks_for(profile.avg_prompt_tokens + profile.avg_output_tokens)
        self.waiting: list[Request] = []
        self.running: list[_Running] = []
        self.preempted: deque[_Running] = deque()
        self.held_blocks = 0
        self.max_blocks = table.num_slabs * table.blocks_per_slab(self.key)

    def blocks_needed(self, tokens):
        return -(-tokens // self.tpb)

    def admissible(self, req: Request) -> bool:
        """Whether the prompt fits one batch and an otherwise empty pool."""
        if req.prompt_tokens > self.profile.max_batched_tokens:
            return False
        return self.blocks_needed(req.prompt_tokens + 1) + 1 <= self.max_blocks

    def caps(self):
        free = self.table.free_blocks(self.key)
        n_max = min(self.profile.max_num_seqs - len(self.running), free // self.avg_blocks)
        t_max = min(self.profile.max_batched_tokens, free * self.tpb)
        return max(n_max, 0), max(t_max, 0)

    def grab(self, n, now):
        got = []
        try:
            for _ in range(n):
                got.append(self.table.alloc(self.key, now=now))
        except PoolExhaustedError:
            for h in got:
                self.table.free(h, now=now)
            return None
        self.held_blocks += n
        return got

    def release(self, run: _Running, now):
        for h in run.blocks:
            self.table.free(h, now=now)
        self.held_blocks -= len(run.blocks)
        run.blocks = []

    def cached_tokens(self):
        return sum(r.tokens for r in self.running)


# -- metrics --------------------------------------------------------------------


@dataclass
class ModelMetrics:
    model_id: str
    arrived: int = 0
    completed: int = 0
    dropped: int = 0
    aborted: int = 0
    attained: int = 0
    attainment: float = 0.0
    throughput: float = 0.0
    slo_attained_throughput: float = 0.0
    token_gen_throughput: float = 0.0
    decode_tokens: int = 0
    mean_ttft: float | None = None
    peak_queue: int = 0
    mean_cached_tokens: float = 0.0
    kv_pool_bytes: int = 0
    preemptions: int = 0


@dataclass
class MetricsReport:
    mode: str
    policy: str
    duration: float
    makespan: float
    models: dict[str, ModelMetrics]
    aggregate: ModelMetrics
    phases: dict[str, dict[str, dict]]
    series: list[dict]
    ttft_log: list[dict]
    decisions: list[dict] = field(default_factory=list)
    anchor_violations: int = 0
    pool_bytes: dict[str, int] = field(default_factory=dict)
    slab_size_bytes: dict[str, int] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "schema": METRICS_SCHEMA,
            "mode": self.mode,
            "policy": self.policy,
            "duration": self.duration,
            "makespan": self.makespan,
            "models": {k: asdict(v) for k, v in sorted(self.models.items())},
            "aggregate": asdict(self.aggregate),
            "phases": self.phases,
            "anchor_violations": self.anchor_violations,
            "pool_bytes": self.pool_bytes,
            "slab_size_bytes": self.slab_size_bytes,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)

    def series_csv(self) -> str:
        buf = io.StringIO()
        if self.series:
            w = csv.DictWriter(buf, fieldnames=list(self.series[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(self.series)
        return buf.getvalue()

    def write(self, out_dir, prefix: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}summary.json", out / f"{prefix}series.csv",
                 out / f"{prefix}ttft.csv", out / f"{prefix}decisions.jsonl"]
        paths[0].write_text(self.summary_json() + "\n")
        paths[1].write_text(self.series_csv())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["request_id", "model_id", "arrival_time_s", "ttft_s", "status"])
        for rec in self.ttft_log:
            w.writerow([rec["request_id"], rec["model_id"], rec["arrival_time_s"],
                        "" if rec["ttft_s"] is None else rec["ttft_s"], rec["status"]])
        paths[2].write_text(buf.getvalue())
        paths[3].write_text("".join(json.dumps(d, sort_keys=True) + "\n" for d in self.decisions))
        return paths


def attainment_from_log(ttft_log, slos: Mapping[str, float], model_id: str | None = None) -> float:
    """Fraction of logged requests whose TTFT is within their model's SLO."""
    rows = [r for r in ttft_log if model_id is None or r["model_id"] == model_id]
    if not rows:
        return 0.0
    ok = sum(1 for r in rows if r["ttft_s"] is not None and r["ttft_s"] <= slos[r["model_id"]])
    return ok / len(rows)


# -- pools ------------------------------------------------------------------------


def kv_capacity(group: GpuGroup) -> int:
    """Per-GPU bytes left for KV after resident weights and activations."""
    used = 0
    for m in group.residents:
        b = operating_batch(m)
        used += -(-m.weight_bytes // m.tp_degree) + m.activation_table[b]
    return group.total_memory - used


def _pool_override(cfg: SimConfig, group_id: str):
    if cfg.kv_pool_bytes is None:
        return None
    if isinstance(cfg.kv_pool_bytes, Mapping):
        return cfg.kv_pool_bytes.get(group_id)
    return int(cfg.kv_pool_bytes)


def build_pools(plan: PlacementPlan, cfg: SimConfig, record_ops: bool = False):
    """Create slab tables; returns ``{model_id: (table, capacity_bytes)}`` and slab sizes."""
    pools = {}
    slab_sizes = {}
    pool_bytes = {}
    for g in plan.groups:
        if not g.residents:
            continue
        cap = _pool_override(cfg, g.group_id)
        if cap is None:
            cap = kv_capacity(g)
        if cap <= 0:
            raise InvalidScenarioError(f"group {g.group_id}: no memory left for KV cache")
        pool_bytes[g.group_id] = cap
        keys = [kv_block_size(m) for m in g.residents]
        if cfg.mode == "dynamic":
            slab = cfg.slab_size_bytes or auto_slab_size(keys, cfg.slab_multiplier)
            table = SlabTable(SlabPoolConfig(cap, slab, set(keys)), record_ops=record_ops)
            slab_sizes[g.group_id] = slab
            for m in g.residents:
                pools[m.model_id] = (table, cap)
        else:
            fps = [base_footprint(m) for m in g.residents]
            total = sum(fps)
            for m, fp, key in zip(g.residents, fps, keys):
                share = cap * fp // total
                slab = key * cfg.slab_multiplier
                if share < slab:
                    raise InvalidScenarioError(
                        f"group {g.group_id}: static partition of {m.model_id} ({share} B) holds no slab"
                    )
                pools[m.model_id] = (SlabTable(SlabPoolConfig(share, slab, {key}), record_ops=record_ops), share)
            slab_sizes[g.group_id] = max(keys) * cfg.slab_multiplier
    return pools, slab_sizes, pool_bytes


# -- simulator --------------------------------------------------------------------

_ARRIVAL, _DEVICE = 0, 1


class _Device:
    def __init__(self, group_id, engines):
        self.group_id = group_id
        self.engines = engines
        self.rr = 0
        self.idle = True


class Simulator:
    def __init__(self, plan: PlacementPlan, records: Sequence[TraceRecord], cfg: SimConfig, duration: float):
        self.plan = plan
        self.cfg = cfg
        self.duration = duration
        self.pools, self.slab_sizes, self.pool_bytes = build_pools(plan, cfg)
        self.engines: dict[str, EngineState] = {}
        self.devices = []
        for g in plan.groups:
            engs = []
            for m in g.residents:
                table, cap = self.pools[m.model_id]
                e = EngineState(m, g.group_id, table, cap)
                self.engines[m.model_id] = e
                engs.append(e)
            if engs:
                self.devices.append(_Device(g.group_id, engs))

        # DP replicas "<id>#dp<i>" share the base model's traffic round robin
        self.replicas: dict[str, list[str]] = {}
        for mid in self.engines:
            self.replicas.setdefault(mid.split("#dp")[0], []).append(mid)
        unknown = sorted({r.model_id for r in records} - set(self.replicas))
        if unknown:
            raise InvalidScenarioError(f"workload models without placement: {unknown}")
        self.requests = []
        rr = dict.fromkeys(self.replicas, 0)
        for i, rec in enumerate(records):
            targets = self.replicas[rec.model_id]
            mid = targets[rr[rec.model_id] % len(targets)]
            rr[rec.model_id] += 1
            slo = self.engines[mid].profile.ttft_slo
            self.requests.append(
                Request.with_slo(i, mid, rec.arrival_time_s, rec.prompt_tokens, rec.output_tokens, slo)
            )

        self.now = 0.0
        self.events = []
        self._seq = 0
        self.ttft: dict[int, float] = {}
        self.status: dict[int, str] = {}
        self.decisions = []
        self.anchor_violations = 0
        self.decode_tokens = dict.fromkeys(self.engines, 0)
        self.preemptions = dict.fromkeys(self.engines, 0)
        self.peak_queue = dict.fromkeys(self.engines, 0)
        self.phase_peak = {ph.name: dict.fromkeys(self.engines, 0) for ph in cfg.phases}
        window = cfg.measure_window or (0.0, duration)
        self.window = window
        self.cached_area = dict.fromkeys(self.engines, 0.0)
        self.series = []
        self._next_sample = 0.0
        self._last_t = 0.0

    # -- event plumbing

    def _push(self, t, kind, payload):
        self._seq += 1
        heapq.heappush(self.events, (t, kind, self._seq, payload))

    def _integrate(self, t):
        lo, hi = self.window
        a, b = max(self._last_t, lo), min(t, hi)
        if b > a:
            for mid, e in self.engines.items():
                self.cached_area[mid] += e.cached_tokens() * (b - a)
        self._last_t = t

    def _sample_until(self, t):
        while self._next_sample <= t:
            ts = self._next_sample
            row = {"time_s": round(ts, 9)}
            for mid in sorted(self.engines):
                e = self.engines[mid]
                row[f"{mid}.queue"] = len(e.waiting)
                row[f"{mid}.running"] = len(e.running)
                row[f"{mid}.kv_blocks"] = e.held_blocks
                row[f"{mid}.cached_tokens"] = e.cached_tokens()
                row[f"{mid}.internal_bytes"] = sum(
                    (len(r.blocks) * e.tpb - r.tokens) * e.key // e.tpb for r in e.running
                )
            seen = set()
            for mid in sorted(self.engines):
                table = self.engines[mid].table
                if id(table) in seen:
                    continue
                seen.add(id(table))
                st = table.stats()
                tag = self.engines[mid].group_id if self.cfg.mode == "dynamic" else mid
                row[f"pool[{tag}].allocated_bytes"] = st.allocated_bytes
                row[f"pool[{tag}].free_block_bytes"] = st.free_block_bytes
                row[f"pool[{tag}].free_slab_bytes"] = st.free_slab_bytes
                row[f"pool[{tag}].residue_bytes"] = st.slab_residue_bytes
            self.series.append(row)
            self._next_sample = ts + self.cfg.sample_interval

    def _phase_of(self, t):
        return [ph.name for ph in self.cfg.phases if ph.start <= t < ph.end]

    def _note_queue(self, e):
        q = len(e.waiting)
        if q > self.peak_queue[e.model_id]:
            self.peak_queue[e.model_id] = q
        for name in self._phase_of(self.now):
            if q > self.phase_peak[name][e.model_id]:
                self.phase_peak[name][e.model_id] = q

    # -- engine actions

    def _try_resume(self, e: EngineState):
        run = e.preempted[0]
        need = e.blocks_needed(run.tokens + 1)
        if e.table.free_blocks(e.key) < need + 1:
            return None
        blocks = e.grab(need, self.now)
        if blocks is None:
            return None
        e.preempted.popleft()
        run.blocks = blocks
        e.running.append(run)
        return ("resume", e, [run], e.profile.cost.prefill_time(run.tokens, e.profile.chunk_tokens))

    def _try_admit(self, e: EngineState):
        n_max, t_max = e.caps()
        policy = schedule_batch if self.cfg.policy == "adaptive" else fcfs_batch
        d: BatchDecision = policy(e.waiting, self.now, e.profile.cost, n_max, t_max, e.profile.chunk_tokens)
        for r in d.dropped:
            self.status[r.request_id] = "dropped"
        executed = []
        for i, r in enumerate(d.admitted):
            blocks = e.grab(e.blocks_needed(r.prompt_tokens + 1), self.now)
            if blocks is None:
                d.deferred.extend(d.admitted[i:])
                break
            executed.append(_Running(r, blocks))
        d.admitted = [run.req for run in executed]
        d.predicted_ttft = (
            e.profile.cost.prefill_time(sum(r.prompt_tokens for r in d.admitted), e.profile.chunk_tokens)
            if d.admitted
            else None
        )
        gone = {r.request_id for r in d.dropped} | {r.request_id for r in d.admitted}
        if gone:
            e.waiting = [r for r in e.waiting if r.request_id not in gone]
        if d.admitted and self.cfg.policy == "adaptive":
            if not self.now + d.predicted_ttft < d.admitted[0].deadline:
                self.anchor_violations += 1
        if self.cfg.record_decisions and (d.admitted or d.dropped):
            self.decisions.append(d.log_record(e.model_id))
        if not executed:
            return None
        e.running.extend(executed)
        return ("prefill", e, executed, d.predicted_ttft)

    def _try_decode(self, e: EngineState):
        if not e.running:
            return None
        while True:
            progressing = []
            for run in e.running:
                need = e.blocks_needed(run.tokens + 1)
                if need > len(run.blocks):
                    got = e.grab(need - len(run.blocks), self.now)
                    if got is None:
                        continue
                    run.blocks.extend(got)
                progressing.append(run)
            if progressing:
                break
            # every running sequence is stuck on memory: recompute-preempt the
            # most recently admitted one so the rest can grow
            victim = e.running.pop()
            e.release(victim, self.now)
            self.preemptions[e.model_id] += 1
            if e.blocks_needed(victim.tokens + 1) + 1 > e.max_blocks:
                # would not fit even in an empty pool
                self._finish(e, victim, "aborted")
            else:
                e.preempted.appendleft(victim)
            if not e.running:
                return None
        cached = sum(r.tokens for r in progressing)
        return ("decode", e, progressing, e.profile.cost.decode_time(len(progressing), cached))

    def _next_action(self, e: EngineState):
        if e.preempted:
            act = self._try_resume(e)
            if act:
                return act
        if e.waiting:
            act = self._try_admit(e)
            if act:
                return act
        return self._try_decode(e)

    def _finish(self, e, run, status):
        if run.blocks:
            e.release(run, self.now)
        self.status[run.req.request_id] = status

    def _complete(self, action):
        kind, e, runs, _ = action
        if kind == "prefill":
            for run in runs:
                run.generated = 1
                run.first_token = self.now
                self.ttft[run.req.request_id] = self.now - run.req.arrival_time
        elif kind == "decode":
            for run in runs:
                run.generated += 1
            self.decode_tokens[e.model_id] += len(runs)
        done = [run for run in runs if run.generated >= run.req.output_tokens]
        if done:
            ids = {id(r) for r in done}
            e.running = [r for r in e.running if id(r) not in ids]
            for run in done:
                self._finish(e, run, "completed")

    def _device_tick(self, dev: _Device, pending):
        if pending is not None:
            self._complete(pending)
        n = len(dev.engines)
        for i in range(n):
            e = dev.engines[(dev.rr + i) % n]
            act = self._next_action(e)
            if act is not None:
                dev.rr = (dev.rr + i + 1) % n
                dev.idle = False
                self._push(self.now + act[3], _DEVICE, (dev, act))
                return
        dev.idle = True

    def _check(self):
        seen = {}
        for e in self.engines.values():
            held = sum(len(r.blocks) for r in e.running)
            assert held == e.held_blocks, "engine block counter drift"
            for r in e.running:
                # between events a request holds blocks for its tokens, or
                # one token more while a step that extends it is in flight
                assert len(r.blocks) in (e.blocks_needed(r.tokens), e.blocks_needed(r.tokens + 1))
            assert all(not r.blocks for r in e.preempted)
            seen.setdefault(id(e.table), [e.table, 0])[1] += held * e.key
        for table, held_bytes in seen.values():
            assert table.allocated_bytes == held_bytes, "pool allocation disagrees with held blocks"
            assert table.stats().total == table.usable_bytes
            assert table.device_alloc_calls == 1

    def run(self) -> MetricsReport:
        dev_of = {e.model_id: d for d in self.devices for e in d.engines}
        for r in self.requests:
            self._push(r.arrival_time, _ARRIVAL, r)
        horizon = self.cfg.max_time if self.cfg.max_time is not None else 3.0 * self.duration + 60.0
        while self.events:
            t, kind, _, payload = heapq.heappop(self.events)
            if t > horizon:
                break
            self._integrate(t)
            self._sample_until(t)
            self.now = t
            if kind == _ARRIVAL:
                e = self.engines[payload.model_id]
                if not e.admissible(payload):
                    # no batch could ever hold it; queueing would block fcfs forever
                    self.status[payload.request_id] = "aborted"
                    continue
                e.waiting.append(payload)
                self._note_queue(e)
                dev = dev_of[payload.model_id]
                if dev.idle:
                    dev.idle = False
                    self._push(t, _DEVICE, (dev, None))
            else:
                dev, pending = payload
                self._device_tick(dev, pending)
            if self.cfg.check_invariants:
                self._check()
        end = self.now
        self._integrate(max(end, self.window[1]))
        self._sample_until(end)
        if self.cfg.check_invariants and not self.events:
            for table, _ in self.pools.values():
                assert table.allocated_bytes == 0, "blocks leaked at end of simulation"
        return self._report(end)

    def _report(self, end) -> MetricsReport:
        makespan = max(end, self.duration)
        slos = {mid: e.profile.ttft_slo for mid, e in self.engines.items()}
        log = []
        for r in self.requests:
            t = self.ttft.get(r.request_id)
            log.append(
                {
                    "request_id": r.request_id,
                    "model_id": r.model_id,
                    "arrival_time_s": r.arrival_time,
                    "ttft_s": t,
                    "status": self.status.get(r.request_id, "unfinished"),
                }
            )
        win = self.window[1] - self.window[0]
        models = {}
        for mid, e in self.engines.items():
            rows = [x for x in log if x["model_id"] == mid]
            ttfts = [x["ttft_s"] for x in rows if x["ttft_s"] is not None]
            attained = sum(1 for t in ttfts if t <= slos[mid])
            completed = sum(1 for x in rows if x["status"] == "completed")
            models[mid] = ModelMetrics(
                model_id=mid,
                arrived=len(rows),
                completed=completed,
                dropped=sum(1 for x in rows if x["status"] == "dropped"),
                aborted=sum(1 for x in rows if x["status"] == "aborted"),
                attained=attained,
                attainment=attained / len(rows) if rows else 0.0,
                throughput=completed / makespan,
                slo_attained_throughput=attained / makespan,
                token_gen_throughput=self.decode_tokens[mid] / makespan,
                decode_tokens=self.decode_tokens[mid],
                mean_ttft=sum(ttfts) / len(ttfts) if ttfts else None,
                peak_queue=self.peak_queue[mid],
                mean_cached_tokens=self.cached_area[mid] / win if win > 0 else 0.0,
                kv_pool_bytes=e.capacity,
                preemptions=self.preemptions[mid],
            )
        agg = ModelMetrics(model_id="*")
        for m in models.values():
            for f in ("arrived", "completed", "dropped", "aborted", "attained", "decode_tokens", "preemptions"):
                setattr(agg, f, getattr(agg, f) + getattr(m, f))
            agg.mean_cached_tokens += m.mean_cached_tokens
            agg.peak_queue = max(agg.peak_queue, m.peak_queue)
        agg.attainment = agg.attained / agg.arrived if agg.arrived else 0.0
        agg.throughput = agg.completed / makespan
        agg.slo_attained_throughput = agg.attained / makespan
        agg.token_gen_throughput = agg.decode_tokens / makespan
        all_ttft = [x["ttft_s"] for x in log if x["ttft_s"] is not None]
        agg.mean_ttft = sum(all_ttft) / len(all_ttft) if all_ttft else None
        agg.kv_pool_bytes = sum(self.pool_bytes.values())

        phases = {}
        for ph in self.cfg.phases:
            span = ph.end - ph.start
            per = {}
            for mid in sorted(self.engines):
                rows = [x for x in log if x["model_id"] == mid and ph.start <= x["arrival_time_s"] < ph.end]
                att = sum(1 for x in rows if x["ttft_s"] is not None and x["ttft_s"] <= slos[mid])
                per[mid] = {
                    "arrived": len(rows),
                    "attained": att,
                    "slo_attained_throughput": att / span,
                    "peak_queue": self.phase_peak[ph.name][mid],
                }
            per["*"] = {
                "arrived": sum(v["arrived"] for v in per.values()),
                "attained": sum(v["attained"] for v in per.values()),
                "slo_attained_throughput": sum(v["attained"] for v in per.values()) / span,
                "peak_queue": max(v["peak_queue"] for v in per.values()),
            }
            phases[ph.name] = per

        return MetricsReport(
            mode=self.cfg.mode,
            policy=self.cfg.policy,
            duration=self.duration,
            makespan=makespan,
            models=models,
            aggregate=agg,
            phases=phases,
            series=self.series,
            ttft_log=log,
            decisions=self.decisions,
            anchor_violations=self.anchor_violations,
            pool_bytes=self.pool_bytes,
            slab_size_bytes=self.slab_sizes,
        )


def run_simulation(
    plan: PlacementPlan,
    workload: WorkloadSpec | Sequence[TraceRecord],
    mode: str = "dynamic",
    policy: str = "adaptive",
    config: SimConfig | None = None,
    duration: float | None = None,
) -> MetricsReport:
    """Simulate serving ``workload`` on ``plan``.

    ``mode`` and ``policy`` override the fields of ``config``.  A trace
    (list of records) needs ``duration`` unless it can be inferred from the
    last arrival.
    """
    cfg = config or SimConfig()
    cfg = SimConfig(**{**cfg.__dict__, "mode": mode, "policy": policy})
    if isinstance(workload, WorkloadSpec):
        records = generate_workload(workload)
        duration = workload.duration if duration is None else duration
    else:
        records = list(workload)
        if duration is None:
            duration = math.ceil(records[-1].arrival_time_s) if records else 0.0
    return Simulator(plan, records, cfg, duration).run()


def measure_mme(small: MetricsReport, large: MetricsReport, model_id: str) -> float:
    """Finite-difference slope of mean cached tokens over KV pool bytes."""
    a, b = small.models[model_id], large.models[model_id]
    dk = b.kv_pool_bytes - a.kv_pool_bytes
    if dk == 0:
        raise InvalidMeasurementError("the two runs have the same KV pool size")
    return (b.mean_cached_tokens - a.mean_cached_tokens) / dk
