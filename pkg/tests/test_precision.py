import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_group, make_profile
from slabserve.batching import CostModel
from slabserve.errors import InfeasibleRateError, InfeasibleSloError, InvalidProfileError
from slabserve.precision import (
    PrecisionSpec,
    base_footprint,
    estimate_mme,
    expand_replicas,
    kv_block_size,
    operating_batch,
    required_replicas,
    token_size,
)


class TestPrecisionSpec:
    def test_parse(self):
        assert PrecisionSpec.parse("W8A8KV8") == PrecisionSpec(8, 8, 8)
        assert PrecisionSpec.parse("w4a8kv4") == PrecisionSpec(4, 8, 4)

    def test_missing_kv_means_fp16_cache(self):
        assert PrecisionSpec.parse("W4A16").kv_bits == 16

    def test_notation_round_trip(self):
        for text in ("W16A16KV16", "W4A8KV4", "W8A8KV8"):
            assert PrecisionSpec.parse(text).notation == text

    @pytest.mark.parametrize("bad", ["W3A8KV8", "FP16", "W8A8KV2", ""])
    def test_rejects(self, bad):
        with pytest.raises(InvalidProfileError):
            PrecisionSpec.parse(bad)

    def test_rejects_bits_directly(self):
        with pytest.raises(InvalidProfileError):
            PrecisionSpec(16, 16, 2)


class TestTokenSize:
    def test_fp16(self):
        assert token_size(make_profile()) == 4096

    def test_fp8(self):
        assert token_size(make_profile(precision="W8A8KV8")) == 2048

    def test_tp_halves(self):
        assert token_size(make_profile(tp_degree=2)) == 2048

    def test_kv4_is_whole_bytes(self):
        assert token_size(make_profile(precision="W4A8KV4")) == 1024
        assert token_size(make_profile(precision="W4A8KV4", num_kv_heads=1, head_dim=1)) == 1

    def test_heads_not_divisible(self):
        with pytest.raises(InvalidProfileError):
            make_profile(num_kv_heads=6, tp_degree=4)

    @given(
        heads=st.integers(1, 8),
        tp_pow=st.integers(0, 3),
        dim=st.integers(1, 64),
        bits=st.sampled_from([4, 8, 16]),
    )
    def test_linear_scaling(self, heads, tp_pow, dim, bits):
        tp = 2**tp_pow
        prec = f"W16A16KV{bits}"
        p = make_profile(precision=prec, num_kv_heads=heads * tp, head_dim=dim, tp_degree=tp)
        assert token_size(p) == heads * dim * 2 * bits // 8
        more_heads = make_profile(precision=prec, num_kv_heads=2 * heads * tp, head_dim=dim, tp_degree=tp)
        assert token_size(more_heads) == 2 * token_size(p)
        wider = make_profile(precision=prec, num_kv_heads=heads * tp, head_dim=3 * dim, tp_degree=tp)
        assert token_size(wider) == 3 * token_size(p)
        if bits < 16:
            more_bits = make_profile(precision=f"W16A16KV{bits * 2}", num_kv_heads=heads * tp, head_dim=dim, tp_degree=tp)
            assert token_size(more_bits) == 2 * token_size(p)


class TestKvBlockSize:
    def test_fp16_single_layer(self):
        assert kv_block_size(make_profile()) == 65536

    def test_fp8_with_quant_params(self):
        assert kv_block_size(make_profile(precision="W8A8KV8", quant_param_bytes_per_block=64)) == 32832

    def test_layers_multiply(self):
        assert kv_block_size(make_profile(num_layers=32)) == 32 * 65536

    def test_zero_tokens_per_block(self):
        with pytest.raises(InvalidProfileError):
            make_profile(tokens_per_block=0)

    @given(tpb=st.integers(1, 64), q=st.integers(0, 4096))
    def test_strictly_monotone(self, tpb, q):
        a = kv_block_size(make_profile(tokens_per_block=tpb, quant_param_bytes_per_block=q))
        assert kv_block_size(make_profile(tokens_per_block=tpb + 1, quant_param_bytes_per_block=q)) > a
        assert kv_block_size(make_profile(tokens_per_block=tpb, quant_param_bytes_per_block=q + 1)) > a


class TestFootprint:
    TABLE = {1: 1.0, 4: 3.0, 8: 5.0}
    KV = {1: 100, 4: 400, 8: 800}
    ACT = {1: 10, 4: 40, 8: 80}

    def _p(self, rate, table=None, kv=None, act=None):
        return make_profile(
            request_rate=rate,
            throughput_table=table or self.TABLE,
            avg_kv_bytes=kv or self.KV,
            avg_activation_bytes=act or self.ACT,
            weight_bytes=1000,
            tp_degree=2,
        )

    def test_smallest_satisfying_batch(self):
        p = self._p(2.0)
        assert operating_batch(p) == 4
        assert base_footprint(p) == 500 + 40 + 400

    def test_infeasible_rate_carries_max(self):
        p = self._p(6.0, table={1: 1.0, 8: 5.0}, kv={1: 1, 8: 8}, act={1: 1, 8: 8})
        with pytest.raises(InfeasibleRateError) as ei:
            base_footprint(p)
        assert ei.value.max_rate == 5.0

    def test_boundary_equality(self):
        p = self._p(1.0, table={1: 1.0}, kv={1: 7}, act={1: 3})
        assert base_footprint(p) == 500 + 3 + 7

    def test_weights_split_by_ceiling(self):
        p = make_profile(weight_bytes=1001, tp_degree=2, num_kv_heads=8, avg_activation_bytes=0)
        assert base_footprint(p) == 501

    def test_scalar_profiled_bytes(self):
        p = make_profile(avg_activation_bytes=5, avg_kv_bytes=7, weight_bytes=10)
        assert base_footprint(p) == 22

    def test_tables_must_cover_batch_sizes(self):
        with pytest.raises(InvalidProfileError):
            make_profile(avg_kv_bytes={1: 3})

    def test_tables_must_not_shrink(self):
        with pytest.raises(InvalidProfileError):
            make_profile(avg_kv_bytes={1: 5, 8: 3})

    @given(r1=st.floats(0.01, 5.0), r2=st.floats(0.01, 5.0))
    def test_non_decreasing_in_rate(self, r1, r2):
        lo, hi = sorted((r1, r2))
        assert base_footprint(self._p(lo)) <= base_footprint(self._p(hi))


class TestReplicas:
    def test_no_replication_needed(self):
        p = make_profile(request_rate=3.0, throughput_table={1: 1.0, 4: 3.0}, ttft_slo=1.0)
        assert required_replicas(p) == 1

    def test_only_batch_one_is_safe(self):
        # b=1 is SLO-safe, b=8 is not: 8 x 256 prompt tokens at 1 ms/token
        p = make_profile(
            request_rate=4.0,
            throughput_table={1: 1.0, 8: 6.0},
            ttft_slo=0.3,
            cost=CostModel(alpha=0.0, beta=1e-3),
        )
        assert required_replicas(p) == 4

    def test_slo_below_fixed_overhead(self):
        p = make_profile(ttft_slo=0.01, cost=CostModel(alpha=0.02, beta=1e-4))
        with pytest.raises(InfeasibleSloError):
            required_replicas(p)

    def test_expansion_splits_rate(self):
        p = make_profile(
            model_id="x",
            request_rate=4.0,
            throughput_table={1: 1.0, 8: 6.0},
            ttft_slo=0.3,
            cost=CostModel(alpha=0.0, beta=1e-3),
        )
        reps = expand_replicas([p])
        assert [r.model_id for r in reps] == ["x#dp0", "x#dp1", "x#dp2", "x#dp3"]
        assert all(r.request_rate == 1.0 for r in reps)


class TestMme:
    def test_fp8_doubles_fp16(self):
        fp16 = estimate_mme(make_profile(num_layers=32)).tokens_per_byte
        fp8 = estimate_mme(make_profile(precision="W8A8KV8", num_layers=32)).tokens_per_byte
        assert fp8 / fp16 == pytest.approx(2.0, abs=0.01)

    def test_kv4_quadruples_fp16(self):
        fp16 = estimate_mme(make_profile()).tokens_per_byte
        kv4 = estimate_mme(make_profile(precision="W4A8KV4")).tokens_per_byte
        assert kv4 / fp16 == pytest.approx(4.0)

    def test_half_block_waste_amortized(self):
        p = make_profile(avg_prompt_tokens=100, avg_output_tokens=100)
        block = 65536
        assert estimate_mme(p).tokens_per_byte == pytest.approx(1 / (block / 16 + 0.5 * block / 200))

    def test_pass_through(self):
        g = make_group()
        est = estimate_mme(make_profile(model_id="a"), g, slopes={"a": 0.25 / 1024})
        assert est.tokens_per_byte == 0.25 / 1024
        assert est.group_id == "g0"

    def test_positive(self):
        with pytest.raises(ValueError):
            estimate_mme(make_profile(model_id="a"), None, slopes={"a": 0.0})

    @given(bits=st.sampled_from([(16, 8), (16, 4), (8, 4)]), layers=st.integers(1, 80))
    def test_lower_bits_more_efficient(self, bits, layers):
        hi, lo = bits
        a = estimate_mme(make_profile(precision=f"W16A16KV{hi}", num_layers=layers)).tokens_per_byte
        b = estimate_mme(make_profile(precision=f"W16A16KV{lo}", num_layers=layers)).tokens_per_byte
        assert b > a


def test_profile_validation():
    with pytest.raises(InvalidProfileError):
        make_profile(request_rate=0)
    with pytest.raises(InvalidProfileError):
        make_profile(ttft_slo=0)
    with pytest.raises(InvalidProfileError):
        make_profile(weight_bytes=-1)
    with pytest.raises(InvalidProfileError):
        make_profile(throughput_table={})
    with pytest.raises(ValueError):
        make_profile(cost=CostModel(alpha=-1, beta=1e-4))
