"""Model-to-GPU placement by memory-efficiency-weighted residual memory.

Models are placed largest base footprint first.  Each candidate group is
scored after charging the candidate's footprint: the mean marginal memory
efficiency of the models that would share the group times the contested
memory left over.  The model goes to the best-scoring group.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import kernels
from .errors import InfeasibleCandidateError, InfeasibleSloError, PlacementInfeasibleError
from .precision import (
    ModelProfile,
    base_footprint,
    estimate_mme,
    expand_replicas,
    kv_block_size,
    slo_safe_batches,
)

DEFAULT_GRID_DIVISIONS = 100


@dataclass
class GpuGroup:
    """A single GPU or a TP-sized set of GPUs that hosts model shards.

    ``total_memory`` is the per-GPU budget; every member holds one shard of
    each resident model.
    """

    group_id: str
    member_gpus: list[str]
    total_memory: int
    residents: list[ModelProfile] = field(default_factory=list)

    @property
    def tp_degree(self) -> int:
        return len(self.member_gpus)

    def used_memory(self) -> int:
        return sum(base_footprint(m) for m in self.residents)

    def residual(self) -> int:
        return self.total_memory - self.used_memory()

    def resident_ids(self) -> list[str]:
        return [m.model_id for m in self.residents]


# -- raw scores --------------------------------------------------------------


def proxy_score(mus: Sequence[float], k_rem: float) -> float:
    """Mean efficiency times residual memory."""
    return sum(mus) / len(mus) * k_rem


def exact_score(mus: Sequence[float], k_rem: float, step: float | None = None) -> float:
    """Best split of ``k_rem`` into positive grid-multiple shares, by brute force.

    Each model receives at least one ``step``; ``step`` defaults to
    ``k_rem / 100``.
    """
    if k_rem <= 0:
        return 0.0
    step = k_rem / DEFAULT_GRID_DIVISIONS if step is None else step
    units = math.floor(k_rem / step + 1e-9)
    if units < len(mus):
        return 0.0
    return kernels.grid_allocation_max(list(mus), units) * step


# -- group scores -------------------------------------------------------------


def _candidate_view(group: GpuGroup, candidate: ModelProfile):
    if candidate.tp_degree != group.tp_degree:
        raise InfeasibleCandidateError(
            f"{candidate.model_id} needs TP={candidate.tp_degree}, group {group.group_id} has {group.tp_degree} GPUs"
        )
    k_rem = group.residual() - base_footprint(candidate)
    if k_rem < 0:
        raise InfeasibleCandidateError(f"{candidate.model_id} does not fit on group {group.group_id}")
    return group.residents + [candidate], k_rem


def _mus(models, group, slopes):
    return [estimate_mme(m, group, slopes).tokens_per_byte for m in models]


def score_proxy(group: GpuGroup, candidate: ModelProfile, slopes: Mapping[str, float] | None = None) -> float:
    models, k_rem = _candidate_view(group, candidate)
    return proxy_score(_mus(models, group, slopes), k_rem)


def score_exact(
    group: GpuGroup,
    candidate: ModelProfile,
    step: float | None = None,
    slopes: Mapping[str, float] | None = None,
) -> float:
    models, k_rem = _candidate_view(group, candidate)
    return exact_score(_mus(models, group, slopes), k_rem, step)


# -- placement ----------------------------------------------------------------


@dataclass
class PlacementPlan:
    assignments: dict[str, str]
    residuals: dict[str, int]
    trace: list[dict]
    profiles: dict[str, ModelProfile]
    groups: list[GpuGroup]

    def group_of(self, model_id: str) -> GpuGroup:
        gid = self.assignments[model_id]
        return next(g for g in self.groups if g.group_id == gid)

    def co_located(self) -> dict[str, list[str]]:
        return {g.group_id: g.resident_ids() for g in self.groups}

    def to_report(self) -> dict:
        return {
            "schema": "slabserve.placement/1",
            "models": [
                {
                    "model_id": mid,
                    "group": gid,
                    "precision": self.profiles[mid].precision.notation,
                    "footprint_bytes": base_footprint(self.profiles[mid]),
                    "kv_block_bytes": kv_block_size(self.profiles[mid]),
                }
                for mid, gid in self.assignments.items()
            ],
            "groups": [
                {
                    "group_id": g.group_id,
                    "gpus": list(g.member_gpus),
                    "total_memory": g.total_memory,
                    "residents": g.resident_ids(),
                    "residual_bytes": self.residuals[g.group_id],
                }
                for g in self.groups
            ],
            "trace": self.trace,
        }


def _check_operating_point(model: ModelProfile):
    if not slo_safe_batches(model):
        raise InfeasibleSloError(f"model {model.model_id!r} has no SLO-safe operating point")


def place_models(
    models: Sequence[ModelProfile],
    groups: Sequence[GpuGroup],
    slopes: Mapping[str, float] | None = None,
) -> PlacementPlan:
    """Greedy placement in descending base-footprint order.

    Models needing replication to meet their SLO are split into DP
    replicas first.  Input groups are not modified.
    """
    expanded = expand_replicas(models)
    groups = [copy.copy(g) for g in groups]
    for g in groups:
        g.residents = list(g.residents)
    footprints = {m.model_id: base_footprint(m) for m in expanded}
    order = sorted(expanded, key=lambda m: (-footprints[m.model_id], m.model_id))

    assignments: dict[str, str] = {}
    trace = []
    for model in order:
        _check_operating_point(model)
        scores: dict[str, float | None] = {}
        best = None
        for g in groups:
            try:
                s = score_proxy(g, model, slopes)
            except InfeasibleCandidateError:
                scores[g.group_id] = None
                continue
            scores[g.group_id] = s
            if best is None or s > best[0] or (s == best[0] and g.group_id < best[1].group_id):
                best = (s, g)
        if best is None:
            raise PlacementInfeasibleError(model.model_id)
        best[1].residents.append(model)
        assignments[model.model_id] = best[1].group_id
        trace.append(
            {
                "model_id": model.model_id,
                "footprint_bytes": footprints[model.model_id],
                "scores": scores,
                "chosen": best[1].group_id,
            }
        )

    residuals = {g.group_id: g.residual() for g in groups}
    assert all(r >= 0 for r in residuals.values())
    return PlacementPlan(
        assignments=assignments,
        residuals=residuals,
        trace=trace,
        profiles={m.model_id: m for m in expanded},
        groups=groups,
    )


def plan_from_assignments(
    models: Sequence[ModelProfile],
    groups: Sequence[GpuGroup],
    assignments: Mapping[str, str],
) -> PlacementPlan:
    """Build a plan from a fixed model -> group map (no replication)."""
    groups = [copy.copy(g) for g in groups]
    by_id = {g.group_id: g for g in groups}
    for g in groups:
        g.residents = list(g.residents)
    for m in models:
        gid = assignments.get(m.model_id)
        if gid not in by_id:
            raise PlacementInfeasibleError(m.model_id, f"model {m.model_id!r} assigned to unknown group {gid!r}")
        g = by_id[gid]
        try:
            _candidate_view(g, m)
        except InfeasibleCandidateError as exc:
            raise PlacementInfeasibleError(m.model_id, str(exc)) from None
        g.residents.append(m)
    return PlacementPlan(
        assignments={m.model_id: assignments[m.model_id] for m in models},
        residuals={g.group_id: g.residual() for g in groups},
        trace=[],
        profiles={m.model_id: m for m in models},
        groups=groups,
    )
