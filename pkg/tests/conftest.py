import os

import pytest
from hypothesis import HealthCheck, settings

from slabserve.batching import CostModel
from slabserve.placement import GpuGroup
from slabserve.precision import ModelProfile, PrecisionSpec

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GIB = 1 << 30


def make_profile(model_id="m", precision="W16A16KV16", **kw):
    base = dict(
        model_id=model_id,
        precision=PrecisionSpec.parse(precision),
        num_kv_heads=8,
        head_dim=128,
        num_layers=1,
        tp_degree=1,
        tokens_per_block=16,
        quant_param_bytes_per_block=0,
        weight_bytes=8 * GIB,
        avg_activation_bytes=GIB,
        avg_kv_bytes=0,
        request_rate=1.0,
        ttft_slo=1.0,
        cost=CostModel(alpha=0.005, beta=1e-4),
        throughput_table={1: 2.0, 8: 8.0},
    )
    base.update(kw)
    return ModelProfile(**base)


def make_group(group_id="g0", gpus=1, memory=80 * GIB):
    return GpuGroup(group_id, [f"{group_id}.gpu{i}" for i in range(gpus)], memory)


@pytest.fixture
def profile():
    return make_profile()


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
