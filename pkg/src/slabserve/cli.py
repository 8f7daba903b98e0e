"""Command-line entry point: ``slabserve {place,simulate,mme-sweep,selftest}``.

Exit codes: 0 success, 1 usage or configuration error, 2 infeasible
placement or SLO, 3 self-test failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

from .config import ScenarioConfig, bundled_scenario, load_config
from .errors import (
    InfeasibleRateError,
    InfeasibleSloError,
    InvalidConfigError,
    InvalidScenarioError,
    PlacementInfeasibleError,
    SlabServeError,
)
from .placement import PlacementPlan, place_models, plan_from_assignments
from .sim import measure_mme, run_simulation
from .workload import read_trace

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_SELFTEST = 0, 1, 2, 3

_SIZE = re.compile(r"^\s*(\d+)\s*([KMG]i?B?|B)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "B": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text: str) -> int:
    """``"512M"`` -> 536870912.  Suffixes K/M/G are binary."""
    m = _SIZE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    unit = (m.group(2) or "").upper()[:1]
    return int(m.group(1)) * _UNITS[unit]


def parse_sweep(text: str) -> list[int]:
    sizes = [parse_size(x) for x in text.split(",") if x.strip()]
    if len(sizes) < 2:
        raise argparse.ArgumentTypeError("a sweep needs at least two pool sizes")
    if len(set(sizes)) != len(sizes):
        raise argparse.ArgumentTypeError("sweep sizes must be distinct")
    return sorted(sizes)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario YAML file, or the name of a bundled scenario")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out-dir", help="directory for output files")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--mode", choices=("dynamic", "static"))
    sim.add_argument("--policy", choices=("adaptive", "fcfs"))

    p = _Parser(prog="slabserve", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("place", parents=[common], help="compute a model-to-GPU placement")
    s = sub.add_parser("simulate", parents=[common, sim], help="simulate serving a scenario")
    s.add_argument("--sweep", type=parse_sweep, help="comma-separated KV pool sizes, e.g. 256M,512M")
    m = sub.add_parser("mme-sweep", parents=[common, sim], help="measure memory efficiency over pool sizes")
    m.add_argument("--sweep", type=parse_sweep, required=True, help="comma-separated KV pool sizes")
    t = sub.add_parser("selftest", parents=[common], help="run the built-in oracle suites")
    t.add_argument("--inject-corruption", action="store_true", help="flip a slab bitmap bit (negative test)")
    return p


# -- helpers ------------------------------------------------------------------------


def _load(args) -> ScenarioConfig:
    if not args.config:
        raise InvalidConfigError("--config is required")
    path = Path(args.config)
    if not path.exists() and not path.suffix:
        path = bundled_scenario(args.config)
    cfg = load_config(path)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _plan(cfg: ScenarioConfig) -> PlacementPlan:
    if cfg.placement is None:
        return place_models(cfg.models, cfg.gpu_groups())
    missing = [m.model_id for m in cfg.models if m.model_id not in cfg.placement]
    if missing:
        raise InvalidConfigError(f"placement: no group given for {missing}")
    return plan_from_assignments(cfg.models, cfg.gpu_groups(), cfg.placement)


def _workload(cfg: ScenarioConfig):
    if cfg.trace_path:
        path = Path(cfg.trace_path)
        path = path if path.is_absolute() else cfg.base_dir / path
        records = read_trace(path)
        duration = cfg.workload.duration if cfg.workload else None
        return records, duration
    return cfg.workload_with_seed(), None


def _out_dir(args, cfg) -> Path:
    return Path(args.out_dir or cfg.output_dir)


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# -- commands -------------------------------------------------------------------------


def cmd_place(args) -> int:
    cfg = _load(args)
    plan = _plan(cfg)
    report = plan.to_report()
    print(json.dumps(report, sort_keys=True, indent=2))
    if args.out_dir:
        _dump(report, Path(args.out_dir) / "placement.json")
    return EXIT_OK


def _simulate_once(cfg, plan, args, out: Path, pool_bytes=None):
    overrides = {}
    if pool_bytes is not None:
        overrides["kv_pool_bytes"] = pool_bytes
    sim_cfg = cfg.sim_config(**overrides)
    workload, duration = _workload(cfg)
    report = run_simulation(
        plan, workload, args.mode or sim_cfg.mode, args.policy or sim_cfg.policy, sim_cfg, duration=duration
    )
    report.write(out)
    return report


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.sweep:
        return _sweep(cfg, args)
    plan = _plan(cfg)
    out = _out_dir(args, cfg)
    _dump(plan.to_report(), out / "placement.json")
    report = _simulate_once(cfg, plan, args, out)
    agg = report.aggregate
    print(
        f"{report.mode}/{report.policy}: {agg.arrived} requests, attainment {agg.attainment:.4f}, "
        f"SLO-attained throughput {agg.slo_attained_throughput:.3f} req/s, "
        f"decode throughput {agg.token_gen_throughput:.1f} tok/s -> {out}"
    )
    for name, phase in sorted(report.phases.items()):
        print(f"  phase {name}: {json.dumps(phase['*'], sort_keys=True)}")
    return EXIT_OK


def _sweep(cfg, args) -> int:
    plan = _plan(cfg)
    out = _out_dir(args, cfg)
    _dump(plan.to_report(), out / "placement.json")
    reports = []
    for size in args.sweep:
        rep = _simulate_once(cfg, plan, args, out / f"pool_{size}", pool_bytes=size)
        reports.append((size, rep))
        print(f"pool {size} B: " + ", ".join(
            f"{mid} cached {m.mean_cached_tokens:.1f}" for mid, m in sorted(rep.models.items())))
    rows = []
    for (k0, r0), (k1, r1) in zip(reports, reports[1:]):
        for mid in sorted(r0.models):
            rows.append({"model_id": mid, "pool_bytes_low": k0, "pool_bytes_high": k1,
                         "tokens_per_byte": measure_mme(r0, r1, mid)})
    with open(out / "mme.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"{'model':<16}{'K_low':>14}{'K_high':>14}{'tokens/byte':>16}")
    for r in rows:
        print(f"{r['model_id']:<16}{r['pool_bytes_low']:>14}{r['pool_bytes_high']:>14}{r['tokens_per_byte']:>16.6e}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed or 0, inject_corruption=args.inject_corruption)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


COMMANDS = {"place": cmd_place, "simulate": cmd_simulate, "mme-sweep": cmd_simulate, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (PlacementInfeasibleError, InfeasibleSloError, InfeasibleRateError) as exc:
        print(f"slabserve: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InvalidConfigError, InvalidScenarioError) as exc:
        print(f"slabserve: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SlabServeError as exc:
        print(f"slabserve: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
