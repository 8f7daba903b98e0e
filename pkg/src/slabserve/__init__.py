"""Slab-based KV memory sharing and SLO-aware scheduling for co-located
mixed-precision LLMs, with a deterministic serving simulator."""

from .batching import BatchDecision, CostModel, Request, fcfs_batch, moore_hodgson, predict_ttft, schedule_batch
from .errors import *  # noqa: F401,F403
from .placement import GpuGroup, PlacementPlan, place_models, plan_from_assignments, score_exact, score_proxy
from .precision import (
    ModelProfile,
    PrecisionSpec,
    base_footprint,
    estimate_mme,
    kv_block_size,
    required_replicas,
    token_size,
)
from .sim import MetricsReport, SimConfig, measure_mme, run_simulation
from .slab import BlockHandle, FragmentationStats, SlabPoolConfig, SlabState, SlabTable
from .workload import LengthDist, ModelWorkload, RatePhase, WorkloadSpec, generate_workload

__version__ = "0.1.0"
