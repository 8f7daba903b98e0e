"""Synthetic request traces: Poisson arrivals with sampled lengths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .batching import Request


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution with support ``>= 1``.

    kinds: ``fixed`` (value), ``uniform`` (low, high inclusive),
    ``lognormal`` (mean, sigma of the underlying normal, clipped to
    [low, high]) and ``histogram`` (values with weights, e.g. an empirical
    ShareGPT length histogram).
    """

    kind: str = "fixed"
    value: int = 256
    low: int = 1
    high: int = 4096
    mean: float = 5.0
    sigma: float = 1.0
    values: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal", "histogram"):
            raise ValueError(f"unknown length distribution {self.kind!r}")
        if self.kind == "fixed" and self.value < 1:
            raise ValueError("fixed length must be >= 1")
        if self.kind in ("uniform", "lognormal") and not 1 <= self.low <= self.high:
            raise ValueError("need 1 <= low <= high")
        if self.kind == "histogram":
            if not self.values or len(self.values) != len(self.weights):
                raise ValueError("histogram needs matching values and weights")
            if min(self.values) < 1 or min(self.weights) < 0 or sum(self.weights) <= 0:
                raise ValueError("histogram values must be >= 1 and weights non-negative")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.value, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.low, self.high + 1, size=n)
        if self.kind == "lognormal":
            x = np.rint(rng.lognormal(self.mean, self.sigma, size=n)).astype(np.int64)
            return np.clip(x, self.low, self.high)
        p = np.asarray(self.weights, dtype=float)
        return rng.choice(np.asarray(self.values, dtype=np.int64), size=n, p=p / p.sum())

    @classmethod
    def from_histogram_file(cls, path) -> "LengthDist":
        """Load ``{"values": [...], "weights": [...]}`` or two-column CSV."""
        path = Path(path)
        if path.suffix == ".json":
            data = json.loads(path.read_text())
            return cls(kind="histogram", values=tuple(data["values"]), weights=tuple(data["weights"]))
        rows = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
        return cls(kind="histogram", values=tuple(int(v) for v in rows[:, 0]), weights=tuple(rows[:, 1]))

    def expected(self) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        if self.kind == "histogram":
            p = np.asarray(self.weights, dtype=float)
            return float(np.dot(self.values, p / p.sum()))
        return float(np.exp(self.mean + self.sigma**2 / 2))


@dataclass(frozen=True)
class RatePhase:
    start: float
    end: float
    rate: float

    def __post_init__(self):
        if self.end <= self.start or self.rate < 0:
            raise ValueError(f"bad rate phase {self}")


@dataclass(frozen=True)
class ModelWorkload:
    rate: float | None = None
    phases: tuple = ()
    rate_scale: float = 1.0
    prompt: LengthDist = field(default_factory=lambda: LengthDist("fixed", 256))
    output: LengthDist = field(default_factory=lambda: LengthDist("fixed", 128))

    def schedule(self, duration: float) -> tuple:
        if self.phases:
            return tuple(self.phases)
        if self.rate is None:
            raise ValueError("model workload needs a rate or phases")
        return (RatePhase(0.0, duration, self.rate),)


@dataclass(frozen=True)
class WorkloadSpec:
    models: Mapping[str, ModelWorkload]
    seed: int = 0
    duration: float = 60.0


@dataclass(frozen=True)
class TraceRecord:
    arrival_time_s: float
    model_id: str
    prompt_tokens: int
    output_tokens: int


def generate_workload(spec: WorkloadSpec) -> list[TraceRecord]:
    """Poisson arrivals per model and phase, ordered by arrival time.

    Each model draws from its own child stream of ``spec.seed`` (models in
    sorted id order), so adding a model leaves the others' traces intact
    only if it sorts last.
    """
    ids = sorted(spec.models)
    streams = np.random.SeedSequence(spec.seed).spawn(len(ids))
    records = []
    for mid, ss in zip(ids, streams):
        w = spec.models[mid]
        rng = np.random.default_rng(ss)
        times = []
        for ph in w.schedule(spec.duration):
            rate = ph.rate * w.rate_scale
            if rate <= 0:
                continue
            t = ph.start
            end = min(ph.end, spec.duration)
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= end:
                    break
                times.append(t)
        n = len(times)
        prompts = w.prompt.sample(rng, n)
        outputs = w.output.sample(rng, n)
        records.extend(
            TraceRecord(float(t), mid, int(p), int(o)) for t, p, o in zip(times, prompts, outputs)
        )
    records.sort(key=lambda r: (r.arrival_time_s, r.model_id))
    return records


def to_requests(records: Sequence[TraceRecord], slos: Mapping[str, float]) -> list[Request]:
    """Number records in order and attach ``arrival + slo`` deadlines."""
    return [
        Request.with_slo(i, r.model_id, r.arrival_time_s, r.prompt_tokens, r.output_tokens, slos[r.model_id])
        for i, r in enumerate(records)
    ]


def write_trace(records: Sequence[TraceRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "arrival_time_s": r.arrival_time_s,
                        "model_id": r.model_id,
                        "prompt_tokens": r.prompt_tokens,
                        "output_tokens": r.output_tokens,
                    }
                )
                + "\n"
            )


def read_trace(path) -> list[TraceRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = TraceRecord(
                    float(d["arrival_time_s"]), str(d["model_id"]), int(d["prompt_tokens"]), int(d["output_tokens"])
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from None
            if rec.prompt_tokens < 1 or rec.output_tokens < 1:
                raise ValueError(f"{path}:{lineno}: token counts must be >= 1")
            out.append(rec)
    out.sort(key=lambda r: (r.arrival_time_s, r.model_id))
    return out
