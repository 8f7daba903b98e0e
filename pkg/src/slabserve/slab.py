"""Per-GPU KV slab allocator.

One pre-allocated byte pool is cut into equal slabs.  A slab is formatted
on demand to a single block size (its *key*) and hands out blocks of that
size; once its last block is released it goes back to the free list and
may be reformatted to any other registered key.  Block IDs seen by an
engine are ``slab_id * blocks_per_slab(key) + local_id``.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable

from .errors import (
    InvalidConfigError,
    InvalidFreeError,
    InvalidKeyError,
    InvariantViolation,
    PoolExhaustedError,
)


class SlabState(enum.Enum):
    FREE = "FREE"
    PARTIAL = "PARTIAL"
    FULL = "FULL"


def lcm_of(keys: Iterable[int]) -> int:
    return reduce(math.lcm, keys, 1)


def auto_slab_size(keys: Iterable[int], multiplier: int = 1) -> int:
    """Smallest legal slab size times ``multiplier``."""
    if multiplier < 1:
        raise InvalidConfigError("slab multiplier must be >= 1")
    return lcm_of(keys) * multiplier


@dataclass(frozen=True)
class SlabPoolConfig:
    capacity_bytes: int
    slab_size_bytes: int
    registered_keys: frozenset
    # False admits slab sizes that are not a multiple of every key; the
    # leftover bytes then show up as slab residue.
    require_lcm: bool = True

    def __init__(self, capacity_bytes, slab_size_bytes, registered_keys, require_lcm=True):
        object.__setattr__(self, "capacity_bytes", int(capacity_bytes))
        object.__setattr__(self, "slab_size_bytes", int(slab_size_bytes))
        object.__setattr__(self, "registered_keys", frozenset(int(k) for k in registered_keys))
        object.__setattr__(self, "require_lcm", bool(require_lcm))

    def validate(self):
        if self.capacity_bytes < 0:
            raise InvalidConfigError("capacity_bytes must be >= 0")
        if self.slab_size_bytes < 1:
            raise InvalidConfigError("slab_size_bytes must be >= 1")
        if not self.registered_keys:
            raise InvalidConfigError("at least one block-size key must be registered")
        for k in sorted(self.registered_keys):
            if k < 1:
                raise InvalidConfigError(f"block-size key {k} must be >= 1")
            if k > self.slab_size_bytes:
                raise InvalidConfigError(f"block-size key {k} exceeds slab size {self.slab_size_bytes}")
        if self.require_lcm:
            lcm = lcm_of(self.registered_keys)
            if self.slab_size_bytes % lcm:
                raise InvalidConfigError(
                    f"slab size {self.slab_size_bytes} is not a multiple of lcm(keys) = {lcm}"
                )

    @property
    def num_slabs(self) -> int:
        return self.capacity_bytes // self.slab_size_bytes

    @property
    def tail_bytes(self) -> int:
        return self.capacity_bytes % self.slab_size_bytes


@dataclass
class Slab:
    slab_id: int
    key: int | None = None
    blocks_total: int = 0
    bitmap: int = 0
    used: int = 0

    @property
    def state(self) -> SlabState:
        if self.key is None:
            return SlabState.FREE
        return SlabState.FULL if self.used == self.blocks_total else SlabState.PARTIAL


@dataclass(frozen=True)
class BlockHandle:
    slab_id: int
    local_block_id: int
    global_block_id: int
    key: int


@dataclass(frozen=True)
class FragmentationStats:
    """Byte accounting of a pool.

    The first four fields partition the usable capacity.  ``internal_bytes``
    is the unused part of allocated blocks (a subset of ``allocated_bytes``)
    as reported by callers through the fill level of each block.
    """

    allocated_bytes: int
    free_block_bytes: int
    slab_residue_bytes: int
    free_slab_bytes: int
    internal_bytes: int = 0
    tail_bytes: int = 0

    @property
    def total(self) -> int:
        return self.allocated_bytes + self.free_block_bytes + self.slab_residue_bytes + self.free_slab_bytes


class _IdSet:
    """Set of slab ids with O(log n) access to the smallest member."""

    __slots__ = ("members", "_heap")

    def __init__(self, ids=()):
        self.members = set(ids)
        self._heap = sorted(self.members)

    def add(self, sid):
        if sid not in self.members:
            self.members.add(sid)
            heapq.heappush(self._heap, sid)
            if len(self._heap) > 4 * len(self.members) + 64:
                self._heap = sorted(self.members)

    def discard(self, sid):
        self.members.discard(sid)

    def min(self):
        heap = self._heap
        while heap[0] not in self.members:
            heapq.heappop(heap)
        return heap[0]

    def __bool__(self):
        return bool(self.members)

    def __len__(self):
        return len(self.members)

    def __contains__(self, sid):
        return sid in self.members

    def __iter__(self):
        return iter(sorted(self.members))


class SlabTable:
    """Slab metadata for one GPU's shared KV pool.

    Not thread safe: one writer (the simulator's event loop) at a time.
    """

    def __init__(self, config: SlabPoolConfig, record_ops: bool = False):
        config.validate()
        self.config = config
        self.slab_size = config.slab_size_bytes
        self.keys = tuple(sorted(config.registered_keys))
        self._bps = {k: self.slab_size // k for k in self.keys}
        self.slabs = [Slab(i) for i in range(config.num_slabs)]
        self._partial = {k: _IdSet() for k in self.keys}
        self._free = _IdSet(range(config.num_slabs))
        self._key_free_blocks = dict.fromkeys(self.keys, 0)
        self._unused: dict[tuple[int, int], int] = {}
        self.allocated_bytes = 0
        self.free_block_bytes = 0
        self.residue_bytes = 0
        self.free_slab_bytes = config.num_slabs * self.slab_size
        self.internal_bytes = 0
        # the single up-front reservation; nothing else may ever touch it
        self.device_alloc_calls = 1
        self.oplog: list[dict] | None = [] if record_ops else None
        self._seq = 0

    # -- queries -----------------------------------------------------------

    @property
    def num_slabs(self) -> int:
        return len(self.slabs)

    @property
    def usable_bytes(self) -> int:
        return self.num_slabs * self.slab_size

    def blocks_per_slab(self, key: int) -> int:
        try:
            return self._bps[key]
        except KeyError:
            raise InvalidKeyError(f"block-size key {key} is not registered") from None

    def free_blocks(self, key: int) -> int:
        """Blocks of ``key`` obtainable right now without any frees."""
        return self._key_free_blocks[key] + len(self._free) * self.blocks_per_slab(key)

    def free_slab_count(self) -> int:
        return len(self._free)

    def partial_slabs(self, key: int) -> list[int]:
        return list(self._partial[key])

    def free_slab_ids(self) -> list[int]:
        return list(self._free)

    def stats(self) -> FragmentationStats:
        return FragmentationStats(
            self.allocated_bytes,
            self.free_block_bytes,
            self.residue_bytes,
            self.free_slab_bytes,
            self.internal_bytes,
            self.config.tail_bytes,
        )

    # -- mutation ----------------------------------------------------------

    def alloc(self, key: int, used_bytes: int | None = None, now: float | None = None) -> BlockHandle:
        bps = self._bps.get(key)
        if bps is None:
            raise InvalidKeyError(f"block-size key {key} is not registered")
        partial = self._partial[key]
        if partial:
            sid = partial.min()
            slab = self.slabs[sid]
        elif self._free:
            sid = self._free.min()
            self._free.discard(sid)
            slab = self.slabs[sid]
            slab.key = key
            slab.blocks_total = bps
            slab.bitmap = 0
            slab.used = 0
            self.free_slab_bytes -= self.slab_size
            self.free_block_bytes += bps * key
            self.residue_bytes += self.slab_size - bps * key
            self._key_free_blocks[key] += bps
            partial.add(sid)
        else:
            raise PoolExhaustedError(f"no slab can serve key {key}")

        bm = slab.bitmap
        local = (~bm & (bm + 1)).bit_length() - 1
        slab.bitmap = bm | (1 << local)
        slab.used += 1
        if slab.used == bps:
            partial.discard(sid)
        self.allocated_bytes += key
        self.free_block_bytes -= key
        self._key_free_blocks[key] -= 1
        if used_bytes is not None and used_bytes < key:
            if used_bytes < 0:
                raise ValueError("used_bytes must be >= 0")
            self._unused[(sid, local)] = key - used_bytes
            self.internal_bytes += key - used_bytes
        handle = BlockHandle(sid, local, sid * bps + local, key)
        if self.oplog is not None:
            self._record("alloc", handle, now)
        return handle

    def set_used(self, handle: BlockHandle, used_bytes: int) -> None:
        """Report how many bytes of an allocated block hold live tokens."""
        self._check_live(handle)
        if not 0 <= used_bytes <= handle.key:
            raise ValueError(f"used_bytes {used_bytes} outside [0, {handle.key}]")
        slot = (handle.slab_id, handle.local_block_id)
        self.internal_bytes -= self._unused.pop(slot, 0)
        if used_bytes < handle.key:
            self._unused[slot] = handle.key - used_bytes
            self.internal_bytes += handle.key - used_bytes

    def free(self, handle: BlockHandle, now: float | None = None) -> None:
        slab = self._check_live(handle)
        sid, local, key = handle.slab_id, handle.local_block_id, handle.key
        was_full = slab.used == slab.blocks_total
        slab.bitmap &= ~(1 << local)
        slab.used -= 1
        self.allocated_bytes -= key
        self.free_block_bytes += key
        self._key_free_blocks[key] += 1
        self.internal_bytes -= self._unused.pop((sid, local), 0)
        if slab.used == 0:
            self._partial[key].discard(sid)
            self.free_block_bytes -= slab.blocks_total * key
            self.residue_bytes -= self.slab_size - slab.blocks_total * key
            self._key_free_blocks[key] -= slab.blocks_total
            self.free_slab_bytes += self.slab_size
            slab.key = None
            slab.blocks_total = 0
            self._free.add(sid)
        elif was_full:
            self._partial[key].add(sid)
        if self.oplog is not None:
            self._record("free", handle, now)

    def _check_live(self, handle: BlockHandle) -> Slab:
        if not isinstance(handle, BlockHandle) or not 0 <= handle.slab_id < len(self.slabs):
            raise InvalidFreeError(f"unknown block handle {handle!r}")
        slab = self.slabs[handle.slab_id]
        if (
            slab.key != handle.key
            or not 0 <= handle.local_block_id < slab.blocks_total
            or not (slab.bitmap >> handle.local_block_id) & 1
            or handle.global_block_id != handle.slab_id * slab.blocks_total + handle.local_block_id
        ):
            raise InvalidFreeError(f"block {handle!r} is not currently allocated")
        return slab

    def _record(self, op, handle, now):
        self._seq += 1
        self.oplog.append(
            {
                "op": op,
                "key": handle.key,
                "slab_id": handle.slab_id,
                "local_id": handle.local_block_id,
                "global_id": handle.global_block_id,
                "timestamp": self._seq if now is None else now,
            }
        )

    # -- verification --------------------------------------------------------

    def verify(self) -> None:
        """Recompute every invariant from the slab bitmaps.

        Raises :class:`InvariantViolation` on the first mismatch.  This is
        O(slabs) and meant for tests and self-checks, not the hot path.
        """
        allocated = free_blocks = residue = free_slabs = 0
        key_free = dict.fromkeys(self.keys, 0)
        for slab in self.slabs:
            sid = slab.slab_id
            bits = bin(slab.bitmap).count("1")
            if bits != slab.used:
                raise InvariantViolation(f"slab {sid}: bitmap has {bits} bits but used={slab.used}")
            if slab.key is None:
                if slab.used or slab.bitmap:
                    raise InvariantViolation(f"slab {sid}: unformatted slab holds blocks")
                if sid not in self._free:
                    raise InvariantViolation(f"slab {sid}: FREE slab missing from free list")
                free_slabs += self.slab_size
                continue
            if slab.used == 0:
                raise InvariantViolation(f"slab {sid}: formatted slab with no live blocks")
            if slab.blocks_total != self.slab_size // slab.key:
                raise InvariantViolation(f"slab {sid}: wrong block count for key {slab.key}")
            if slab.bitmap >> slab.blocks_total:
                raise InvariantViolation(f"slab {sid}: bits set beyond blocks_total")
            if sid in self._free:
                raise InvariantViolation(f"slab {sid}: formatted slab on the free list")
            for k in self.keys:
                want = k == slab.key and slab.state is SlabState.PARTIAL
                if (sid in self._partial[k]) != want:
                    raise InvariantViolation(f"slab {sid}: per-key free list {k} out of sync")
            allocated += slab.used * slab.key
            free_blocks += (slab.blocks_total - slab.used) * slab.key
            residue += self.slab_size - slab.blocks_total * slab.key
            key_free[slab.key] += slab.blocks_total - slab.used
        got = (self.allocated_bytes, self.free_block_bytes, self.residue_bytes, self.free_slab_bytes)
        want = (allocated, free_blocks, residue, free_slabs)
        if got != want:
            raise InvariantViolation(f"counters {got} disagree with recomputed {want}")
        if sum(want) != self.usable_bytes:
            raise InvariantViolation(f"conservation broken: {sum(want)} != {self.usable_bytes}")
        if key_free != self._key_free_blocks:
            raise InvariantViolation("per-key free block counters out of sync")
        if self.internal_bytes != sum(self._unused.values()):
            raise InvariantViolation("internal fragmentation counter out of sync")
        if self.device_alloc_calls != 1:
            raise InvariantViolation("pool grew after creation")

    def _debug_flip_bit(self, slab_id: int, local_id: int = 0) -> None:
        """Corrupt one occupancy bit.  Test hook for the self-check suite."""
        self.slabs[slab_id].bitmap ^= 1 << local_id

    # -- equality and export -------------------------------------------------

    def _state(self):
        return (
            self.config,
            [(s.key, s.blocks_total, s.bitmap, s.used) for s in self.slabs],
            {k: frozenset(v.members) for k, v in self._partial.items()},
            frozenset(self._free.members),
            self.stats(),
            dict(self._unused),
        )

    def __eq__(self, other):
        if not isinstance(other, SlabTable):
            return NotImplemented
        return self._state() == other._state()

    __hash__ = None

    def export_oplog(self, path) -> None:
        if self.oplog is None:
            raise ValueError("table was created without record_ops=True")
        write_oplog(self.oplog, path)


def write_oplog(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_oplog(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def create_pool(config: SlabPoolConfig, record_ops: bool = False) -> SlabTable:
    return SlabTable(config, record_ops=record_ops)


def alloc_block(table: SlabTable, key: int, used_bytes: int | None = None, now: float | None = None) -> BlockHandle:
    return table.alloc(key, used_bytes, now)


def free_block(table: SlabTable, handle: BlockHandle, now: float | None = None) -> None:
    table.free(handle, now)


def blocks_per_slab(table: SlabTable, key: int) -> int:
    return table.blocks_per_slab(key)


def snapshot_stats(table: SlabTable) -> FragmentationStats:
    return table.stats()


def decode_block_id(global_block_id: int, blocks_per_slab: int) -> tuple[int, int]:
    """Inverse of the block-ID map: ``(slab_id, local_id)``."""
    return divmod(global_block_id, blocks_per_slab)
