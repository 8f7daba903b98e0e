"""Per-model SLO-aware adaptive batching.

The local scheduler keeps one waiting queue per model.  Each tick it drops
requests that cannot meet their TTFT deadline even when served alone right
now, orders the rest earliest-deadline-first, and evicts the longest prompt
until the whole batch's chunked prefill finishes before the earliest
deadline in the batch (the anchor).  The surviving batch is then trimmed to
the concurrency and token caps.

Moore-Hodgson and an exhaustive subset search are provided as oracles for
the batch-size-one regime.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import kernels


@dataclass(frozen=True)
class CostModel:
    """Affine latency surrogate for one model on its GPU group.

    Prefill of ``T`` tokens split into chunks of at most ``t_max`` tokens
    costs ``sum(alpha + beta * chunk)``; one decode step over ``b`` sequences
    holding ``c`` cached tokens costs ``gamma + delta * b + epsilon * c``.
    """

    alpha: float
    beta: float
    gamma: float = 0.0
    delta: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "epsilon"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"cost coefficient {name} must be finite and >= 0, got {v!r}")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    def prefill_time(self, tokens: int, t_max: int) -> float:
        if tokens <= 0:
            raise ValueError("prefill needs at least one token")
        chunks = -(-tokens // t_max)
        return chunks * self.alpha + self.beta * tokens

    def decode_time(self, batch: int, cached_tokens: int) -> float:
        return self.gamma + self.delta * batch + self.epsilon * cached_tokens


@dataclass(frozen=True)
class Request:
    request_id: int
    model_id: str
    arrival_time: float
    prompt_tokens: int
    output_tokens: int
    deadline: float

    def __post_init__(self):
        if self.prompt_tokens < 1:
            raise ValueError(f"request {self.request_id}: prompt_tokens must be >= 1")
        if not self.deadline > self.arrival_time:
            raise ValueError(f"request {self.request_id}: deadline must follow arrival")

    @classmethod
    def with_slo(cls, request_id, model_id, arrival_time, prompt_tokens, output_tokens, slo):
        return cls(request_id, model_id, arrival_time, prompt_tokens, output_tokens, arrival_time + slo)


@dataclass
class BatchDecision:
    now: float
    admitted: list[Request] = field(default_factory=list)
    dropped: list[Request] = field(default_factory=list)
    deferred: list[Request] = field(default_factory=list)
    predicted_ttft: float | None = None

    @property
    def anchor_deadline(self) -> float | None:
        return self.admitted[0].deadline if self.admitted else None

    @property
    def admitted_ids(self):
        return [r.request_id for r in self.admitted]

    @property
    def dropped_ids(self):
        return [r.request_id for r in self.dropped]

    @property
    def deferred_ids(self):
        return [r.request_id for r in self.deferred]

    def log_record(self, model_id) -> dict:
        return {
            "tick": self.now,
            "model": model_id,
            "admitted": self.admitted_ids,
            "dropped": self.dropped_ids,
            "deferred": self.deferred_ids,
            "predicted_ttft": self.predicted_ttft,
            "anchor_deadline": self.anchor_deadline,
        }


def predict_ttft(requests: Sequence[Request], cost: CostModel, t_max: int) -> float:
    """Chunked prefill latency of serving ``requests`` together."""
    if not requests:
        raise ValueError("predict_ttft needs a non-empty batch")
    return cost.prefill_time(sum(r.prompt_tokens for r in requests), t_max)


def _edf_key(r: Request):
    return (r.deadline, r.arrival_time, r.request_id)


def _longest_key(r: Request):
    # largest prompt; ties go to the latest deadline, then the larger id
    return (r.prompt_tokens, r.deadline, r.request_id)


def schedule_batch(
    waiting: Iterable[Request],
    now: float,
    cost: CostModel,
    n_max: int,
    t_max: int,
    chunk_tokens: int | None = None,
) -> BatchDecision:
    """One tick of SLO-aware adaptive batching.

    ``t_max`` caps the total prompt tokens admitted; ``chunk_tokens`` is the
    prefill chunk size used for latency prediction and defaults to ``t_max``.
    Deferred requests are left for the caller to keep in its queue.
    """
    chunk = chunk_tokens or t_max
    decision = BatchDecision(now=now)

    batch = []
    for r in waiting:
        if now + cost.prefill_time(r.prompt_tokens, chunk) < r.deadline:
            batch.append(r)
        else:
            decision.dropped.append(r)
    batch.sort(key=_edf_key)

    tokens = sum(r.prompt_tokens for r in batch)
    while batch:
        if now + cost.prefill_time(tokens, chunk) < batch[0].deadline:
            break
        longest = max(batch, key=_longest_key)
        batch.remove(longest)
        tokens -= longest.prompt_tokens
        decision.deferred.append(longest)

    # trim from the back so the anchor survives
    while batch and (len(batch) > n_max or tokens > t_max):
        r = batch.pop()
        tokens -= r.prompt_tokens
        decision.deferred.append(r)

    decision.admitted = batch
    if batch:
        decision.predicted_ttft = cost.prefill_time(tokens, chunk)
    return decision


def fcfs_batch(
    waiting: Iterable[Request],
    now: float,
    cost: CostModel,
    n_max: int,
    t_max: int,
    chunk_tokens: int | None = None,
) -> BatchDecision:
    """Arrival-order admission up to the caps; nothing is ever dropped."""
    chunk = chunk_tokens or t_max
    decision = BatchDecision(now=now)
    queue = sorted(waiting, key=lambda r: (r.arrival_time, r.request_id))
    tokens = 0
    for i, r in enumerate(queue):
        if len(decision.admitted) >= n_max or tokens + r.prompt_tokens > t_max:
            decision.deferred.extend(queue[i:])
            break
        decision.admitted.append(r)
        tokens += r.prompt_tokens
    if decision.admitted:
        decision.predicted_ttft = cost.prefill_time(tokens, chunk)
    return decision


def moore_hodgson(jobs: Sequence[tuple[float, float]], start: float = 0.0) -> int:
    """Maximum number of on-time jobs on one machine (1||sum U_j).

    A job is on time when it completes strictly before its deadline.
    """
    order = sorted(range(len(jobs)), key=lambda i: (jobs[i][1], i))
    heap: list[tuple[float, int]] = []
    t = start
    for i in order:
        p, d = jobs[i]
        heapq.heappush(heap, (-p, -i))
        t += p
        if not t < d:
            neg_p, _ = heapq.heappop(heap)
            t += neg_p
    return len(heap)


def max_ontime_exhaustive(jobs: Sequence[tuple[float, float]], start: float = 0.0) -> int:
    """Brute-force optimum over all subsets (practical up to ~20 jobs)."""
    if not jobs:
        return 0
    ordered = sorted(jobs, key=lambda j: j[1])
    return kernels.max_ontime_subset([p for p, _ in ordered], [d for _, d in ordered], start)


def serve_sequentially(
    requests: Sequence[Request],
    cost: CostModel,
    t_max: int,
    now: float = 0.0,
) -> int:
    """Run :func:`schedule_batch` with ``n_max=1`` to exhaustion on one machine.

    Every admitted request is prefilled alone; returns how many finish
    strictly before their deadline.
    """
    waiting = list(requests)
    on_time = 0
    while waiting:
        d = schedule_batch(waiting, now, cost, n_max=1, t_max=t_max)
        gone = {r.request_id for r in d.dropped}
        if d.admitted:
            r = d.admitted[0]
            gone.add(r.request_id)
            now += cost.prefill_time(r.prompt_tokens, t_max)
            on_time += now < r.deadline
        waiting = [r for r in waiting if r.request_id not in gone]
        if not d.admitted and not d.dropped:
            break
    return on_time
