import json

import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.stateful import Bundle, RuleBasedStateMachine, consumes, invariant, rule

from slabserve.errors import InvalidConfigError, InvalidFreeError, InvalidKeyError, PoolExhaustedError
from slabserve.slab import (
    BlockHandle,
    SlabPoolConfig,
    SlabState,
    SlabTable,
    alloc_block,
    auto_slab_size,
    blocks_per_slab,
    create_pool,
    decode_block_id,
    free_block,
    lcm_of,
    read_oplog,
    snapshot_stats,
)

KIB = 1024


def pool(n_slabs=4, slab=64 * KIB, keys=(64 * KIB, 32 * KIB), **kw):
    return create_pool(SlabPoolConfig(n_slabs * slab, slab, set(keys)), **kw)


class TestCreate:
    def test_four_free_slabs(self):
        t = pool()
        assert t.num_slabs == 4
        assert all(s.state is SlabState.FREE for s in t.slabs)
        assert t.free_slab_ids() == [0, 1, 2, 3]

    def test_coprime_keys(self):
        t = create_pool(SlabPoolConfig(30, 15, {3, 5}))
        assert t.num_slabs == 2

    def test_not_a_multiple(self):
        with pytest.raises(InvalidConfigError):
            create_pool(SlabPoolConfig(4 * 48 * KIB, 48 * KIB, {64 * KIB}))

    def test_key_larger_than_slab(self):
        with pytest.raises(InvalidConfigError):
            create_pool(SlabPoolConfig(100, 10, {20}, require_lcm=False))

    def test_tail_is_reported(self):
        t = create_pool(SlabPoolConfig(100, 30, {10, 15}))
        st_ = t.stats()
        assert st_.tail_bytes == 10
        assert st_.free_slab_bytes == 90
        assert st_.total == t.usable_bytes == 90

    def test_auto_slab_size(self):
        assert lcm_of([4, 6]) == 12
        assert auto_slab_size([4, 6], 3) == 36
        with pytest.raises(InvalidConfigError):
            auto_slab_size([4], 0)

    def test_single_preallocation(self):
        t = pool()
        for _ in range(8):
            alloc_block(t, 32 * KIB)
        assert t.device_alloc_calls == 1


class TestAlloc:
    def test_first_alloc_is_zero(self):
        h = alloc_block(pool(), 32 * KIB)
        assert (h.slab_id, h.local_block_id, h.global_block_id) == (0, 0, 0)

    def test_worked_example_slab_one(self):
        # slab 0 busy with the other key; slab 1 formatted to a 2-blocks-per-slab key
        t = pool()
        alloc_block(t, 64 * KIB)
        h = alloc_block(t, 32 * KIB)
        assert blocks_per_slab(t, 32 * KIB) == 2
        assert (h.slab_id, h.local_block_id, h.global_block_id) == (1, 0, 2)
        h2 = alloc_block(t, 32 * KIB)
        assert (h2.slab_id, h2.local_block_id, h2.global_block_id) == (1, 1, 3)

    def test_prefers_lowest_partial(self):
        t = pool(n_slabs=4)
        hs = [alloc_block(t, 32 * KIB) for _ in range(6)]  # slabs 0,1,2 full
        free_block(t, hs[2])  # slab 1 partial
        free_block(t, hs[0])  # slab 0 partial
        assert alloc_block(t, 32 * KIB).slab_id == 0
        assert alloc_block(t, 32 * KIB).slab_id == 1

    def test_exhaustion_with_mismatched_partial(self):
        t = pool(n_slabs=2)
        alloc_block(t, 32 * KIB)  # slab 0 partial under 32 KiB
        alloc_block(t, 64 * KIB)  # slab 1 full
        with pytest.raises(PoolExhaustedError):
            alloc_block(t, 64 * KIB)
        assert alloc_block(t, 32 * KIB).slab_id == 0

    def test_unregistered_key(self):
        with pytest.raises(InvalidKeyError):
            alloc_block(pool(), 16 * KIB)
        with pytest.raises(InvalidKeyError):
            blocks_per_slab(pool(), 16 * KIB)

    def test_states(self):
        t = pool()
        a = alloc_block(t, 32 * KIB)
        assert t.slabs[0].state is SlabState.PARTIAL
        b = alloc_block(t, 32 * KIB)
        assert t.slabs[0].state is SlabState.FULL
        free_block(t, a)
        assert t.slabs[0].state is SlabState.PARTIAL
        free_block(t, b)
        assert t.slabs[0].state is SlabState.FREE
        assert t.slabs[0].key is None


class TestFree:
    def test_double_free(self):
        t = pool()
        h = alloc_block(t, 32 * KIB)
        free_block(t, h)
        with pytest.raises(InvalidFreeError):
            free_block(t, h)

    def test_unknown_handle(self):
        with pytest.raises(InvalidFreeError):
            free_block(pool(), BlockHandle(99, 0, 0, 32 * KIB))

    def test_wrong_key(self):
        t = pool()
        h = alloc_block(t, 32 * KIB)
        with pytest.raises(InvalidFreeError):
            free_block(t, BlockHandle(h.slab_id, h.local_block_id, h.global_block_id, 64 * KIB))

    def test_freed_slab_takes_any_key(self):
        t = pool(n_slabs=1)
        h = alloc_block(t, 32 * KIB)
        free_block(t, h)
        assert alloc_block(t, 64 * KIB).slab_id == 0


class TestBlocksPerSlab:
    def test_examples(self):
        t = pool()
        assert blocks_per_slab(t, 32 * KIB) == 2
        assert blocks_per_slab(t, 64 * KIB) == 1

    def test_residue(self):
        t = create_pool(SlabPoolConfig(30, 15, {4}, require_lcm=False))
        assert blocks_per_slab(t, 4) == 3
        alloc_block(t, 4)
        assert snapshot_stats(t).slab_residue_bytes == 3


class TestStats:
    def test_fresh(self):
        s = snapshot_stats(pool())
        assert (s.allocated_bytes, s.free_block_bytes, s.slab_residue_bytes) == (0, 0, 0)
        assert s.free_slab_bytes == 4 * 64 * KIB

    def test_one_block(self):
        t = pool()
        alloc_block(t, 32 * KIB)
        s = snapshot_stats(t)
        assert s.allocated_bytes == 32 * KIB
        assert s.free_block_bytes == 32 * KIB

    def test_internal_bytes(self):
        t = pool()
        h = alloc_block(t, 32 * KIB, used_bytes=10 * KIB)
        assert t.stats().internal_bytes == 22 * KIB
        t.set_used(h, 32 * KIB)
        assert t.stats().internal_bytes == 0
        t.set_used(h, 0)
        free_block(t, h)
        assert t.stats().internal_bytes == 0
        t.verify()


class TestIds:
    @given(bps=st.integers(1, 64), slab=st.integers(0, 1000), local=st.integers(0, 63))
    def test_divmod_inverts(self, bps, slab, local):
        local %= bps
        assert decode_block_id(slab * bps + local, bps) == (slab, local)


def test_alloc_free_restores_state():
    t = pool()
    alloc_block(t, 32 * KIB)
    alloc_block(t, 64 * KIB)
    before = pool()
    alloc_block(before, 32 * KIB)
    alloc_block(before, 64 * KIB)
    assert before == t
    h = alloc_block(t, 32 * KIB)
    assert before != t
    free_block(t, h)
    assert before == t


def test_oplog_export(tmp_path):
    t = pool(record_ops=True)
    h = alloc_block(t, 32 * KIB, now=1.5)
    free_block(t, h, now=2.0)
    path = tmp_path / "ops.jsonl"
    t.export_oplog(path)
    recs = read_oplog(path)
    assert [r["op"] for r in recs] == ["alloc", "free"]
    assert set(recs[0]) == {"op", "key", "slab_id", "local_id", "global_id", "timestamp"}
    assert recs[0]["timestamp"] == 1.5
    assert json.loads(path.read_text().splitlines()[1])["op"] == "free"


def test_verify_detects_corruption():
    t = pool()
    h = alloc_block(t, 32 * KIB)
    t._debug_flip_bit(h.slab_id, 1)
    with pytest.raises(AssertionError):
        t.verify()


class SlabMachine(RuleBasedStateMachine):
    """Random interleavings checked against a whole-slab bookkeeping model."""

    KEYS = (2, 3, 4)
    SLAB = 24
    N = 5

    handles = Bundle("handles")

    def __init__(self):
        super().__init__()
        self.t = create_pool(SlabPoolConfig(self.N * self.SLAB + 7, self.SLAB, set(self.KEYS)))
        self.model = {}  # slab -> (key, count)
        self.seen = set()

    @rule(target=handles, key=st.sampled_from(KEYS))
    def alloc(self, key):
        bps = self.SLAB // key
        partial = sorted(s for s, (k, c) in self.model.items() if k == key and c < bps)
        free = sorted(set(range(self.N)) - set(self.model))
        try:
            h = self.t.alloc(key)
        except PoolExhaustedError:
            assert not partial and not free
            return None
        want = partial[0] if partial else free[0]
        assert h.slab_id == want
        k, c = self.model.get(want, (key, 0))
        self.model[want] = (k, c + 1)
        assert h.global_block_id == h.slab_id * bps + h.local_block_id
        assert (key, h.global_block_id) not in self.seen
        self.seen.add((key, h.global_block_id))
        return h

    @rule(h=consumes(handles))
    def free(self, h):
        if h is None:
            return
        self.t.free(h)
        self.seen.discard((h.key, h.global_block_id))
        k, c = self.model[h.slab_id]
        if c == 1:
            del self.model[h.slab_id]
        else:
            self.model[h.slab_id] = (k, c - 1)

    @invariant()
    def conserved(self):
        s = self.t.stats()
        assert s.total == self.t.usable_bytes == self.N * self.SLAB
        assert s.allocated_bytes == sum(k * c for k, c in self.model.values())
        assert s.free_slab_bytes == (self.N - len(self.model)) * self.SLAB
        self.t.verify()


TestSlabMachine = SlabMachine.TestCase
