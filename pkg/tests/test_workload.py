import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from slabserve.workload import (
    LengthDist,
    ModelWorkload,
    RatePhase,
    TraceRecord,
    WorkloadSpec,
    generate_workload,
    read_trace,
    to_requests,
    write_trace,
)


def spec(**models):
    return WorkloadSpec(models=models, seed=3, duration=100.0)


def test_poisson_count_in_range():
    recs = generate_workload(spec(m=ModelWorkload(rate=2.0)))
    # mean 200, sd about 14
    assert 140 <= len(recs) <= 260


def test_interarrival_mean():
    recs = generate_workload(WorkloadSpec({"m": ModelWorkload(rate=5.0)}, seed=1, duration=2000.0))
    gaps = np.diff([r.arrival_time_s for r in recs])
    assert gaps.mean() == pytest.approx(0.2, rel=0.05)


def test_deterministic():
    s = spec(a=ModelWorkload(rate=1.0), b=ModelWorkload(rate=3.0, prompt=LengthDist("uniform", low=8, high=64)))
    assert generate_workload(s) == generate_workload(s)
    other = WorkloadSpec(s.models, seed=4, duration=s.duration)
    assert generate_workload(other) != generate_workload(s)


def test_zero_rate_phase_is_silent():
    w = ModelWorkload(phases=(RatePhase(0, 50, 0.0), RatePhase(50, 100, 4.0)))
    recs = generate_workload(spec(m=w))
    assert recs and min(r.arrival_time_s for r in recs) >= 50


def test_rate_scale():
    base = generate_workload(spec(m=ModelWorkload(rate=1.0)))
    scaled = generate_workload(spec(m=ModelWorkload(rate=1.0, rate_scale=4.0)))
    assert len(scaled) > 2 * len(base)


def test_sorted_and_in_range():
    recs = generate_workload(spec(a=ModelWorkload(rate=3.0), b=ModelWorkload(rate=3.0)))
    times = [r.arrival_time_s for r in recs]
    assert times == sorted(times) and 0 < times[0] and times[-1] < 100


def test_missing_rate():
    with pytest.raises(ValueError):
        generate_workload(spec(m=ModelWorkload()))


def test_bad_phase():
    with pytest.raises(ValueError):
        RatePhase(5, 5, 1.0)
    with pytest.raises(ValueError):
        RatePhase(0, 5, -1.0)


def test_trace_round_trip(tmp_path):
    recs = generate_workload(spec(m=ModelWorkload(rate=1.0, output=LengthDist("lognormal", mean=4, sigma=1))))
    path = tmp_path / "t.jsonl"
    write_trace(recs, path)
    assert read_trace(path) == recs


def test_trace_rejects_bad_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"arrival_time_s": 1, "model_id": "m", "prompt_tokens": 0, "output_tokens": 3}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_trace(path)
    path.write_text('{"arrival_time_s": 1}\n')
    with pytest.raises(ValueError):
        read_trace(path)


def test_to_requests():
    reqs = to_requests([TraceRecord(1.0, "m", 10, 5), TraceRecord(2.0, "n", 3, 1)], {"m": 0.5, "n": 2.0})
    assert [r.request_id for r in reqs] == [0, 1]
    assert [r.deadline for r in reqs] == [1.5, 4.0]


def test_histogram_file(tmp_path):
    p = tmp_path / "h.json"
    p.write_text(json.dumps({"values": [10, 20], "weights": [1, 3]}))
    d = LengthDist.from_histogram_file(p)
    assert d.expected() == pytest.approx(17.5)
    c = tmp_path / "h.csv"
    c.write_text("# len,weight\n10,1\n20,3\n")
    assert LengthDist.from_histogram_file(c) == d
    draws = d.sample(np.random.default_rng(0), 4000)
    assert set(draws.tolist()) == {10, 20}
    assert (draws == 20).mean() == pytest.approx(0.75, abs=0.03)


def test_bad_dists():
    for kw in ({"kind": "nope"}, {"kind": "fixed", "value": 0}, {"kind": "uniform", "low": 5, "high": 4},
               {"kind": "histogram", "values": (1,), "weights": ()}):
        with pytest.raises(ValueError):
            LengthDist(**kw)


@given(kind=st.sampled_from(["fixed", "uniform", "lognormal"]), seed=st.integers(0, 2**31))
def test_samples_at_least_one(kind, seed):
    d = LengthDist(kind, value=7, low=1, high=500, mean=3.0, sigma=2.0)
    x = d.sample(np.random.default_rng(seed), 200)
    assert x.min() >= 1 and x.dtype.kind == "i"
