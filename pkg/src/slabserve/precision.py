"""Precision and memory-footprint arithmetic for quantized model variants."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Mapping

from .batching import CostModel
from .errors import InfeasibleRateError, InfeasibleSloError, InvalidProfileError

if TYPE_CHECKING:
    from .placement import GpuGroup

VALID_BITS = (4, 8, 16)

_NOTATION = re.compile(r"^W(\d+)A(\d+)(?:KV(\d+))?$", re.IGNORECASE)


@dataclass(frozen=True)
class PrecisionSpec:
    weight_bits: int = 16
    activation_bits: int = 16
    kv_bits: int = 16

    def __post_init__(self):
        for name in ("weight_bits", "activation_bits", "kv_bits"):
            if getattr(self, name) not in VALID_BITS:
                raise InvalidProfileError(f"{name} must be one of {VALID_BITS}, got {getattr(self, name)!r}")

    @classmethod
    def parse(cls, text: str) -> "PrecisionSpec":
        """Parse ``W#A#KV#`` notation; a missing KV part means 16-bit KV."""
        m = _NOTATION.match(text.strip())
        if not m:
            raise InvalidProfileError(f"bad precision notation {text!r} (expected e.g. W8A8KV8)")
        w, a, kv = m.groups()
        return cls(int(w), int(a), int(kv) if kv else 16)

    @property
    def notation(self) -> str:
        return f"W{self.weight_bits}A{self.activation_bits}KV{self.kv_bits}"


def _as_table(value, keys, name):
    if isinstance(value, Mapping):
        table = {int(b): int(v) for b, v in value.items()}
        missing = set(keys) - set(table)
        if missing:
            raise InvalidProfileError(f"{name} lacks batch sizes {sorted(missing)}")
        return table
    return {b: int(value) for b in keys}


@dataclass(frozen=True)
class ModelProfile:
    """Architecture, precision, cost model, demand and SLO of one model.

    ``avg_activation_bytes`` and ``avg_kv_bytes`` are profiled per-shard
    footprints; each may be a single number or a map from batch size to
    bytes with the same keys as ``throughput_table``.
    """

    model_id: str
    precision: PrecisionSpec
    num_kv_heads: int
    head_dim: int
    num_layers: int
    tp_degree: int
    tokens_per_block: int
    quant_param_bytes_per_block: int
    weight_bytes: int
    avg_activation_bytes: Mapping[int, int] | int
    avg_kv_bytes: Mapping[int, int] | int
    request_rate: float
    ttft_slo: float
    cost: CostModel
    throughput_table: Mapping[int, float]
    avg_prompt_tokens: int = 256
    avg_output_tokens: int = 256
    chunk_tokens: int = 2048
    max_batched_tokens: int = 8192
    max_num_seqs: int = 256
    activation_table: dict = field(init=False, repr=False, compare=False)
    kv_table: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tp_degree < 1 or self.num_kv_heads < 1 or self.head_dim < 1 or self.num_layers < 1:
            raise InvalidProfileError(f"{self.model_id}: head/layer/TP counts must be >= 1")
        if self.num_kv_heads % self.tp_degree:
            raise InvalidProfileError(
                f"{self.model_id}: {self.num_kv_heads} KV heads not divisible by TP degree {self.tp_degree}"
            )
        if self.tokens_per_block < 1:
            raise InvalidProfileError(f"{self.model_id}: tokens_per_block must be >= 1")
        if self.quant_param_bytes_per_block < 0 or self.weight_bytes < 0:
            raise InvalidProfileError(f"{self.model_id}: byte quantities must be >= 0")
        if not self.request_rate > 0:
            raise InvalidProfileError(f"{self.model_id}: request_rate must be > 0")
        if not self.ttft_slo > 0:
            raise InvalidProfileError(f"{self.model_id}: ttft_slo must be > 0")
        if not self.throughput_table:
            raise InvalidProfileError(f"{self.model_id}: throughput_table is empty")
        if any(b < 1 or t < 0 for b, t in self.throughput_table.items()):
            raise InvalidProfileError(f"{self.model_id}: bad throughput_table entry")
        if min(self.avg_prompt_tokens, self.avg_output_tokens, self.chunk_tokens,
               self.max_batched_tokens, self.max_num_seqs) < 1:
            raise InvalidProfileError(f"{self.model_id}: token and sequence caps must be >= 1")
        keys = sorted(self.throughput_table)
        act = _as_table(self.avg_activation_bytes, keys, "avg_activation_bytes")
        kv = _as_table(self.avg_kv_bytes, keys, "avg_kv_bytes")
        for name, table in (("avg_activation_bytes", act), ("avg_kv_bytes", kv)):
            vals = [table[b] for b in keys]
            if min(vals) < 0:
                raise InvalidProfileError(f"{self.model_id}: {name} must be >= 0")
            if any(x > y for x, y in zip(vals, vals[1:])):
                raise InvalidProfileError(f"{self.model_id}: {name} must not shrink with batch size")
        object.__setattr__(self, "activation_table", act)
        object.__setattr__(self, "kv_table", kv)

    @property
    def key(self) -> int:
        """Slab key (KV block size in bytes) of this model."""
        return kv_block_size(self)

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.tokens_per_block)


def token_size(profile: ModelProfile) -> int:
    """Bytes of K and V for one token in one layer on one TP shard."""
    elems = (profile.num_kv_heads // profile.tp_degree) * profile.head_dim * 2
    bits = elems * profile.precision.kv_bits
    if bits % 8:
        raise InvalidProfileError(f"{profile.model_id}: token size is not a whole number of bytes")
    return bits // 8


def kv_block_size(profile: ModelProfile) -> int:
    """Bytes of one logical KV block spanning every layer."""
    per_layer = profile.tokens_per_block * token_size(profile) + profile.quant_param_bytes_per_block
    return profile.num_layers * per_layer


def operating_batch(profile: ModelProfile, rate: float | None = None) -> int:
    """Smallest profiled batch size whose throughput meets ``rate``."""
    rate = profile.request_rate if rate is None else rate
    for b in sorted(profile.throughput_table):
        if profile.throughput_table[b] >= rate:
            return b
    raise InfeasibleRateError(profile.model_id, rate, max(profile.throughput_table.values()))


def base_footprint(profile: ModelProfile) -> int:
    """Fixed per-shard memory charged at placement: weights + activations + KV."""
    b = operating_batch(profile)
    weights = -(-profile.weight_bytes // profile.tp_degree)
    return weights + profile.activation_table[b] + profile.kv_table[b]


def operating_ttft(profile: ModelProfile, batch: int) -> float:
    """Predicted prefill latency of ``batch`` average-length prompts."""
    return profile.cost.prefill_time(batch * profile.avg_prompt_tokens, profile.chunk_tokens)


def slo_safe_batches(profile: ModelProfile) -> list[int]:
    return [b for b in sorted(profile.throughput_table) if operating_ttft(profile, b) <= profile.ttft_slo]


def required_replicas(profile: ModelProfile) -> int:
    """Fewest data-parallel replicas so each replica's share of the rate is
    met at an SLO-safe batch size."""
    safe = slo_safe_batches(profile)
    if not safe:
        raise InfeasibleSloError(
            f"model {profile.model_id!r}: no profiled batch size meets the {profile.ttft_slo:g}s TTFT SLO"
        )
    best = max(profile.throughput_table[b] for b in safe)
    if best <= 0:
        raise InfeasibleSloError(f"model {profile.model_id!r}: SLO-safe batch sizes have zero throughput")
    # tolerance absorbs float noise in rate / throughput ratios like 4.0 / 1.0
    return max(1, math.ceil(profile.request_rate / best - 1e-9))


@dataclass(frozen=True)
class MmeEstimate:
    model_id: str
    group_id: str | None
    tokens_per_byte: float

    def __post_init__(self):
        if not self.tokens_per_byte > 0:
            raise ValueError("tokens_per_byte must be > 0")


def amortized_token_bytes(profile: ModelProfile) -> float:
    """KV bytes per cached token including expected last-block waste.

    Half a block is wasted per sequence on average, spread over the mean
    sequence length.
    """
    block = kv_block_size(profile)
    seq = profile.avg_prompt_tokens + profile.avg_output_tokens
    return block / profile.tokens_per_block + 0.5 * block / seq


def estimate_mme(
    profile: ModelProfile,
    group: "GpuGroup | None" = None,
    slopes: Mapping[str, float] | None = None,
) -> MmeEstimate:
    """Marginal memory efficiency of ``profile`` on ``group`` in tokens/byte.

    With ``slopes`` (model id -> measured tokens/byte) the measured value is
    passed through; otherwise it is derived from the block geometry.
    """
    group_id = group.group_id if group is not None else None
    if slopes is not None and profile.model_id in slopes:
        return MmeEstimate(profile.model_id, group_id, float(slopes[profile.model_id]))
    return MmeEstimate(profile.model_id, group_id, 1.0 / amortized_token_bytes(profile))


def expand_replicas(profiles) -> list[ModelProfile]:
    """Split each profile into independent DP replicas sharing its rate."""
    out = []
    for p in profiles:
        r = required_replicas(p)
        if r == 1:
            out.append(p)
            continue
        for i in range(r):
            out.append(replace(p, model_id=f"{p.model_id}#dp{i}", request_rate=p.request_rate / r))
    return out
