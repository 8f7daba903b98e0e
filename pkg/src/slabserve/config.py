"""YAML scenario files: cluster, model profiles, workload, slab and simulator settings.

Schema (all byte sizes are integers)::

    seed: 0
    cluster:
      gpus:   [{id: gpu0, memory_bytes: 85899345920}, ...]
      groups: [{id: g0, gpus: [gpu0]}, ...]       # TP groups, formed by hand
    models:
      - id: A
        precision: W16A16KV16
        num_kv_heads: 8
        head_dim: 128
        num_layers: 32
        tp_degree: 1
        tokens_per_block: 16
        quant_param_bytes_per_block: 0
        weight_bytes: 16060522496
        activation_bytes: 2147483648          # or {batch: bytes}
        kv_bytes: {1: ..., 8: ...}             # or a single number
        request_rate: 2.0
        ttft_slo: 1.0
        cost: {alpha: 0.02, beta: 1.0e-4, gamma: 0.01, delta: 1.0e-4, epsilon: 1.0e-7}
        throughput: {1: 1.5, 8: 9.0}
        avg_prompt_tokens: 256                 # optional caps and averages
    workload:                                  # optional
      duration: 60
      trace: path/to/trace.jsonl               # replaces generation
      models:
        A: {rate: 2.0, rate_scale: 1.0, phases: [{start: 0, end: 30, rate: 2.0}],
            prompt: {kind: lognormal, mean: 5.5, sigma: 0.8, low: 4, high: 2048},
            output: {kind: histogram, file: lengths.json}}
    slab: {policy: auto-lcm, multiplier: 1}    # or {policy: explicit, size_bytes: N}
    simulation:
      mode: dynamic                            # dynamic | static
      policy: adaptive                         # adaptive | fcfs
      sample_interval: 1.0
      kv_pool_bytes: {g0: 1073741824}          # optional override per group
      phases: [{name: T1, start: 0, end: 30}]
      measure_window: [10, 60]
    placement: {A: g1}                         # optional fixed assignment
    output: {dir: out}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .batching import CostModel
from .errors import InvalidConfigError, SlabServeError
from .placement import GpuGroup
from .precision import ModelProfile, PrecisionSpec
from .sim import Phase, SimConfig
from .workload import LengthDist, ModelWorkload, RatePhase, WorkloadSpec

SLAB_POLICIES = ("auto-lcm", "explicit")

_MODEL_OPTIONAL = ("avg_prompt_tokens", "avg_output_tokens", "chunk_tokens", "max_batched_tokens", "max_num_seqs")
_COST_FIELDS = ("alpha", "beta", "gamma", "delta", "epsilon")


@dataclass
class ScenarioConfig:
    gpus: dict[str, int]
    groups: list[tuple[str, list[str]]]
    models: list[ModelProfile]
    workload: WorkloadSpec | None = None
    trace_path: str | None = None
    slab_policy: str = "auto-lcm"
    slab_multiplier: int = 1
    slab_size_bytes: int | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    placement: dict[str, str] | None = None
    output_dir: str = "out"
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def gpu_groups(self) -> list[GpuGroup]:
        return [GpuGroup(gid, list(members), min(self.gpus[g] for g in members)) for gid, members in self.groups]

    def sim_config(self, **overrides) -> SimConfig:
        base = {f.name: getattr(self.sim, f.name) for f in fields(SimConfig)}
        base["slab_multiplier"] = self.slab_multiplier
        base["slab_size_bytes"] = self.slab_size_bytes if self.slab_policy == "explicit" else None
        base.update(overrides)
        return SimConfig(**base)

    def workload_with_seed(self, seed: int | None = None) -> WorkloadSpec:
        """Generated workload, defaulting each model to its profiled rate."""
        wl = self.workload or WorkloadSpec(models={}, seed=self.seed)
        models = dict(wl.models)
        for m in self.models:
            models.setdefault(m.model_id, ModelWorkload(rate=m.request_rate))
        return WorkloadSpec(models=models, seed=self.seed if seed is None else seed, duration=wl.duration)


# -- field-path diagnostics -------------------------------------------------------


class _Lines:
    """Map field paths like ``models[1].cost`` to source line numbers."""

    def __init__(self, text: str):
        self.lines: dict[str, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._walk(v, f"{path}.{k.value}" if path else str(k.value))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def where(self, path):
        p = path
        while p and p not in self.lines:
            p = p.rsplit(".", 1)[0] if "." in p else ""
        line = self.lines.get(p)
        return f"line {line}, {path}" if line else path


class _Reader:
    def __init__(self, lines: _Lines | None = None):
        self.lines = lines or _Lines("")

    def fail(self, path, msg):
        raise InvalidConfigError(f"{self.lines.where(path)}: {msg}")

    def get(self, d, key, path, kind=None, default=..., check=None):
        full = f"{path}.{key}" if path else key
        if not isinstance(d, dict):
            self.fail(path, "expected a mapping")
        if key not in d or d[key] is None:
            if default is ...:
                self.fail(full, "missing required field")
            return default
        v = d[key]
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(full, f"expected an integer, got {v!r}")
        elif kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                self.fail(full, f"expected a number, got {v!r}")
            v = float(v)
        elif kind is str:
            if not isinstance(v, (str, int)) or isinstance(v, bool):
                self.fail(full, f"expected a string, got {v!r}")
            v = str(v)
        elif kind is not None and not isinstance(v, kind):
            self.fail(full, f"expected {kind.__name__}, got {type(v).__name__}")
        if check is not None and not check(v):
            self.fail(full, f"invalid value {v!r}")
        return v

    def int_map(self, v, path, value_kind):
        if isinstance(v, dict):
            out = {}
            for k, x in v.items():
                try:
                    kk = int(k)
                except (TypeError, ValueError):
                    self.fail(path, f"batch size keys must be integers, got {k!r}")
                if value_kind is int and (isinstance(x, bool) or not isinstance(x, int)):
                    self.fail(f"{path}.{k}", f"expected an integer, got {x!r}")
                if value_kind is float and (isinstance(x, bool) or not isinstance(x, (int, float))):
                    self.fail(f"{path}.{k}", f"expected a number, got {x!r}")
                out[kk] = value_kind(x)
            return out
        return None


# -- parsing ----------------------------------------------------------------------


def _parse_model(r: _Reader, d, path) -> ModelProfile:
    mid = r.get(d, "id", path, str)
    prec_text = r.get(d, "precision", path, str)
    try:
        prec = PrecisionSpec.parse(prec_text)
    except SlabServeError as exc:
        r.fail(f"{path}.precision", str(exc))
    cost_d = r.get(d, "cost", path, dict)
    cost_kw = {k: r.get(cost_d, k, f"{path}.cost", float, 0.0 if k in ("gamma", "delta", "epsilon") else ...)
               for k in _COST_FIELDS}
    try:
        cost = CostModel(**cost_kw)
    except ValueError as exc:
        r.fail(f"{path}.cost", str(exc))
    tput = r.int_map(r.get(d, "throughput", path, dict), f"{path}.throughput", float)

    def bytes_field(name):
        v = r.get(d, name, path)
        m = r.int_map(v, f"{path}.{name}", int)
        if m is not None:
            return m
        if isinstance(v, bool) or not isinstance(v, int):
            r.fail(f"{path}.{name}", f"expected an integer or a batch-size map, got {v!r}")
        return v

    kw = dict(
        model_id=mid,
        precision=prec,
        num_kv_heads=r.get(d, "num_kv_heads", path, int),
        head_dim=r.get(d, "head_dim", path, int),
        num_layers=r.get(d, "num_layers", path, int),
        tp_degree=r.get(d, "tp_degree", path, int, 1),
        tokens_per_block=r.get(d, "tokens_per_block", path, int, 16),
        quant_param_bytes_per_block=r.get(d, "quant_param_bytes_per_block", path, int, 0),
        weight_bytes=r.get(d, "weight_bytes", path, int),
        avg_activation_bytes=bytes_field("activation_bytes"),
        avg_kv_bytes=bytes_field("kv_bytes"),
        request_rate=r.get(d, "request_rate", path, float),
        ttft_slo=r.get(d, "ttft_slo", path, float),
        cost=cost,
        throughput_table=tput,
    )
    for name in _MODEL_OPTIONAL:
        if name in d:
            kw[name] = r.get(d, name, path, int)
    try:
        return ModelProfile(**kw)
    except SlabServeError as exc:
        r.fail(path, str(exc))


def _parse_dist(r: _Reader, d, path, base_dir: Path) -> LengthDist:
    if isinstance(d, int) and not isinstance(d, bool):
        d = {"kind": "fixed", "value": d}
    kind = r.get(d, "kind", path, str, "fixed")
    try:
        if kind == "histogram" and "file" in d:
            p = Path(r.get(d, "file", path, str))
            return LengthDist.from_histogram_file(p if p.is_absolute() else base_dir / p)
        kw = {"kind": kind}
        for k, t in (("value", int), ("low", int), ("high", int), ("mean", float), ("sigma", float)):
            if k in d:
                kw[k] = r.get(d, k, path, t)
        if "values" in d:
            kw["values"] = tuple(int(x) for x in r.get(d, "values", path, list))
            kw["weights"] = tuple(float(x) for x in r.get(d, "weights", path, list))
        return LengthDist(**kw)
    except (ValueError, OSError, KeyError) as exc:
        r.fail(path, str(exc))


def _parse_workload(r: _Reader, d, path, base_dir, seed):
    duration = r.get(d, "duration", path, float, 60.0, check=lambda x: x > 0)
    trace = r.get(d, "trace", path, str, None)
    models = {}
    for mid, md in (r.get(d, "models", path, dict, {}) or {}).items():
        mp = f"{path}.models.{mid}"
        phases = []
        for i, ph in enumerate(r.get(md, "phases", mp, list, [])):
            pp = f"{mp}.phases[{i}]"
            try:
                phases.append(RatePhase(r.get(ph, "start", pp, float), r.get(ph, "end", pp, float),
                                        r.get(ph, "rate", pp, float)))
            except ValueError as exc:
                r.fail(pp, str(exc))
        kw = dict(
            rate=r.get(md, "rate", mp, float, None, check=lambda x: x > 0),
            phases=tuple(phases),
            rate_scale=r.get(md, "rate_scale", mp, float, 1.0, check=lambda x: x > 0),
        )
        if "prompt" in md:
            kw["prompt"] = _parse_dist(r, md["prompt"], f"{mp}.prompt", base_dir)
        if "output" in md:
            kw["output"] = _parse_dist(r, md["output"], f"{mp}.output", base_dir)
        models[str(mid)] = ModelWorkload(**kw)
    return WorkloadSpec(models=models, seed=seed, duration=duration), trace


def _parse_sim(r: _Reader, d, path) -> SimConfig:
    kw = {}
    if "mode" in d:
        kw["mode"] = r.get(d, "mode", path, str)
    if "policy" in d:
        kw["policy"] = r.get(d, "policy", path, str)
    if "sample_interval" in d:
        kw["sample_interval"] = r.get(d, "sample_interval", path, float)
    if "max_time" in d:
        kw["max_time"] = r.get(d, "max_time", path, float)
    if "check_invariants" in d:
        kw["check_invariants"] = r.get(d, "check_invariants", path, bool)
    if "kv_pool_bytes" in d:
        v = d["kv_pool_bytes"]
        if isinstance(v, dict):
            kw["kv_pool_bytes"] = {str(k): r.get(v, k, f"{path}.kv_pool_bytes", int) for k in v}
        else:
            kw["kv_pool_bytes"] = r.get(d, "kv_pool_bytes", path, int)
    phases = []
    for i, ph in enumerate(r.get(d, "phases", path, list, [])):
        pp = f"{path}.phases[{i}]"
        phases.append(Phase(r.get(ph, "name", pp, str), r.get(ph, "start", pp, float), r.get(ph, "end", pp, float)))
    kw["phases"] = tuple(phases)
    if "measure_window" in d:
        w = r.get(d, "measure_window", path, list, check=lambda x: len(x) == 2)
        kw["measure_window"] = (float(w[0]), float(w[1]))
    try:
        return SimConfig(**kw)
    except SlabServeError as exc:
        r.fail(path, str(exc))


def parse_config(data: dict, base_dir=".", source: str | None = None) -> ScenarioConfig:
    """Build a :class:`ScenarioConfig` from already-loaded YAML data.

    ``source`` (the original text) lets error messages carry line numbers.
    """
    r = _Reader(_Lines(source) if source else None)
    base_dir = Path(base_dir)
    if not isinstance(data, dict):
        r.fail("", "top level must be a mapping")
    seed = r.get(data, "seed", "", int, 0)

    cluster = r.get(data, "cluster", "", dict)
    gpus = {}
    for i, g in enumerate(r.get(cluster, "gpus", "cluster", list)):
        p = f"cluster.gpus[{i}]"
        gid = r.get(g, "id", p, str)
        if gid in gpus:
            r.fail(f"{p}.id", f"duplicate GPU id {gid!r}")
        gpus[gid] = r.get(g, "memory_bytes", p, int, check=lambda x: x > 0)
    groups = []
    used = set()
    for i, g in enumerate(r.get(cluster, "groups", "cluster", list, None) or [{"id": k, "gpus": [k]} for k in gpus]):
        p = f"cluster.groups[{i}]"
        gid = r.get(g, "id", p, str)
        members = [str(x) for x in r.get(g, "gpus", p, list, check=lambda x: len(x) >= 1)]
        for m in members:
            if m not in gpus:
                r.fail(f"{p}.gpus", f"unknown GPU {m!r}")
            if m in used:
                r.fail(f"{p}.gpus", f"GPU {m!r} is in more than one group")
            used.add(m)
        if gid in {x for x, _ in groups}:
            r.fail(f"{p}.id", f"duplicate group id {gid!r}")
        groups.append((gid, members))

    models = [_parse_model(r, m, f"models[{i}]") for i, m in enumerate(r.get(data, "models", "", list))]
    ids = [m.model_id for m in models]
    if len(set(ids)) != len(ids):
        r.fail("models", "duplicate model ids")

    workload, trace = None, None
    if "workload" in data:
        workload, trace = _parse_workload(r, data["workload"], "workload", base_dir, seed)
        for mid in workload.models:
            if mid not in ids:
                r.fail(f"workload.models.{mid}", "unknown model")

    slab = r.get(data, "slab", "", dict, {})
    policy = r.get(slab, "policy", "slab", str, "auto-lcm")
    if policy not in SLAB_POLICIES:
        r.fail("slab.policy", f"must be one of {SLAB_POLICIES}")
    multiplier = r.get(slab, "multiplier", "slab", int, 1, check=lambda x: x >= 1)
    size = r.get(slab, "size_bytes", "slab", int, None, check=lambda x: x > 0)
    if policy == "explicit" and size is None:
        r.fail("slab.size_bytes", "explicit slab policy needs size_bytes")

    sim = _parse_sim(r, r.get(data, "simulation", "", dict, {}), "simulation")
    if isinstance(sim.kv_pool_bytes, dict):
        for gid in sim.kv_pool_bytes:
            if gid not in {g for g, _ in groups}:
                r.fail(f"simulation.kv_pool_bytes.{gid}", "unknown group")

    placement = None
    if "placement" in data:
        placement = {str(k): str(v) for k, v in r.get(data, "placement", "", dict).items()}
        gids = {g for g, _ in groups}
        for mid, gid in placement.items():
            if mid not in ids:
                r.fail(f"placement.{mid}", "unknown model")
            if gid not in gids:
                r.fail(f"placement.{mid}", f"unknown group {gid!r}")
    out = r.get(data, "output", "", dict, {})
    return ScenarioConfig(
        gpus=gpus,
        groups=groups,
        models=models,
        workload=workload,
        trace_path=trace,
        slab_policy=policy,
        slab_multiplier=multiplier,
        slab_size_bytes=size,
        sim=sim,
        placement=placement,
        output_dir=r.get(out, "dir", "output", str, "out"),
        seed=seed,
        base_dir=base_dir,
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "?"
        raise InvalidConfigError(f"{path}: {where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    try:
        return parse_config(data, path.parent, text)
    except InvalidConfigError as exc:
        raise InvalidConfigError(f"{path}: {exc}") from None


# -- serialization ----------------------------------------------------------------


def _dist_dict(d: LengthDist) -> dict:
    if d.kind == "fixed":
        return {"kind": "fixed", "value": d.value}
    if d.kind == "uniform":
        return {"kind": "uniform", "low": d.low, "high": d.high}
    if d.kind == "lognormal":
        return {"kind": "lognormal", "mean": d.mean, "sigma": d.sigma, "low": d.low, "high": d.high}
    return {"kind": "histogram", "values": list(d.values), "weights": list(d.weights)}


def _bytes_value(v):
    return {int(k): int(x) for k, x in v.items()} if isinstance(v, dict) else int(v)


def config_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    """Plain-data form of ``cfg``; ``parse_config`` of it gives back an equal config."""
    out: dict[str, Any] = {
        "seed": cfg.seed,
        "cluster": {
            "gpus": [{"id": g, "memory_bytes": m} for g, m in cfg.gpus.items()],
            "groups": [{"id": g, "gpus": list(members)} for g, members in cfg.groups],
        },
        "models": [],
        "slab": {"policy": cfg.slab_policy, "multiplier": cfg.slab_multiplier},
        "output": {"dir": cfg.output_dir},
    }
    if cfg.slab_size_bytes is not None:
        out["slab"]["size_bytes"] = cfg.slab_size_bytes
    for m in cfg.models:
        md = {
            "id": m.model_id,
            "precision": m.precision.notation,
            "num_kv_heads": m.num_kv_heads,
            "head_dim": m.head_dim,
            "num_layers": m.num_layers,
            "tp_degree": m.tp_degree,
            "tokens_per_block": m.tokens_per_block,
            "quant_param_bytes_per_block": m.quant_param_bytes_per_block,
            "weight_bytes": m.weight_bytes,
            "activation_bytes": _bytes_value(m.avg_activation_bytes),
            "kv_bytes": _bytes_value(m.avg_kv_bytes),
            "request_rate": m.request_rate,
            "ttft_slo": m.ttft_slo,
            "cost": {k: getattr(m.cost, k) for k in _COST_FIELDS},
            "throughput": {int(b): float(t) for b, t in m.throughput_table.items()},
        }
        for name in _MODEL_OPTIONAL:
            md[name] = getattr(m, name)
        out["models"].append(md)
    if cfg.workload is not None:
        wl: dict[str, Any] = {"duration": cfg.workload.duration, "models": {}}
        if cfg.trace_path:
            wl["trace"] = cfg.trace_path
        for mid, w in cfg.workload.models.items():
            wd: dict[str, Any] = {"rate_scale": w.rate_scale, "prompt": _dist_dict(w.prompt),
                                  "output": _dist_dict(w.output)}
            if w.rate is not None:
                wd["rate"] = w.rate
            if w.phases:
                wd["phases"] = [{"start": p.start, "end": p.end, "rate": p.rate} for p in w.phases]
            wl["models"][mid] = wd
        out["workload"] = wl
    s = cfg.sim
    sd: dict[str, Any] = {
        "mode": s.mode,
        "policy": s.policy,
        "sample_interval": s.sample_interval,
        "check_invariants": s.check_invariants,
        "phases": [{"name": p.name, "start": p.start, "end": p.end} for p in s.phases],
    }
    if s.max_time is not None:
        sd["max_time"] = s.max_time
    if s.kv_pool_bytes is not None:
        sd["kv_pool_bytes"] = dict(s.kv_pool_bytes) if isinstance(s.kv_pool_bytes, dict) else s.kv_pool_bytes
    if s.measure_window is not None:
        sd["measure_window"] = list(s.measure_window)
    out["simulation"] = sd
    if cfg.placement is not None:
        out["placement"] = dict(cfg.placement)
    return out


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario file shipped with the package (``three_models``, ``two_phase``)."""
    p = Path(__file__).parent / "data" / f"{name}.yaml"
    if not p.exists():
        raise InvalidConfigError(f"no bundled scenario named {name!r}")
    return p


def with_overrides(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    new = copy.copy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    return new
