"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``SLABSERVE_DISABLE_NUMBA`` is unset (or set to ``0``).  Both
paths are always importable so tests can check them against each other:
``*_numpy`` functions are the fallback, ``*_loop`` functions are the plain
Python sources that numba compiles.

Kernels:

* :func:`grid_allocation_max` -- brute force over an integer grid of
  memory allocations (exact placement score oracle).
* :func:`max_ontime_subset` -- exhaustive subset search for the largest
  set of jobs that can all finish before their deadlines on one machine.
* :func:`whole_slab_replay` -- reference allocator that only tracks
  per-slab key and block count, replayed over a recorded op stream.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = "SLABSERVE_DISABLE_NUMBA"

try:  # pragma: no cover - exercised implicitly by whichever path is live
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get(_FLAG, "0").lower() in ("", "0", "false", "no")


OP_ALLOC = 0
OP_FREE = 1


# --------------------------------------------------------------------------
# grid allocation brute force


def _grid_max_loop(mu, units):
    m = mu.shape[0]
    u = np.ones(m, dtype=np.int64)
    total = m
    best = -np.inf
    while True:
        val = 0.0
        for i in range(m):
            val += mu[i] * u[i]
        if val > best:
            best = val
        i = m - 1
        while i >= 0:
            if total < units:
                u[i] += 1
                total += 1
                break
            total -= u[i] - 1
            u[i] = 1
            i -= 1
        if i < 0:
            break
    return best


def grid_allocation_max_numpy(mu, units):
    """Max of ``sum(mu[i] * u[i])`` over integers ``u[i] >= 1``, ``sum(u) <= units``.

    Enumerates every grid point; requires ``units >= len(mu)``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if units < mu.shape[0]:
        raise ValueError("need at least one grid unit per model")
    m = mu.shape[0]
    steps = np.arange(1, units + 1, dtype=np.int64)
    sums = np.zeros(1, dtype=np.int64)
    vals = np.zeros(1, dtype=np.float64)
    for i in range(m - 1):
        # leave room for one unit per remaining model
        cap = units - (m - 1 - i)
        s = (sums[:, None] + steps[None, :]).ravel()
        v = (vals[:, None] + mu[i] * steps[None, :]).ravel()
        keep = s <= cap
        sums, vals = s[keep], v[keep]
    # last coordinate enumerated without materialising the full grid
    best = -np.inf
    for u in range(1, units + 1):
        ok = sums + u <= units
        if not ok.any():
            break
        best = max(best, float((vals[ok] + mu[m - 1] * u).max()))
    return best


# --------------------------------------------------------------------------
# exhaustive on-time subset


def _max_ontime_loop(proc, deadlines, start):
    # jobs must already be sorted by deadline
    n = proc.shape[0]
    best = 0
    for mask in range(1 << n):
        t = start
        count = 0
        ok = True
        for i in range(n):
            if (mask >> i) & 1:
                t += proc[i]
                count += 1
                if not t < deadlines[i]:
                    ok = False
                    break
        if ok and count > best:
            best = count
    return best


def max_ontime_subset_numpy(proc, deadlines, start=0.0):
    """Largest number of jobs that all complete strictly before their deadline.

    Inputs must be sorted by deadline (EDF order is optimal for a fixed set).
    """
    proc = np.asarray(proc, dtype=np.float64)
    deadlines = np.asarray(deadlines, dtype=np.float64)
    n = proc.shape[0]
    if n == 0:
        return 0
    masks = ((np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)
    finish = start + np.cumsum(masks * proc[None, :], axis=1)
    late = masks & ~(finish < deadlines[None, :])
    ok = ~late.any(axis=1)
    return int(masks[ok].sum(axis=1).max())


# --------------------------------------------------------------------------
# whole-slab reference allocator


def _replay_loop(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size):
    n_ops = kinds.shape[0]
    slab_key = np.full(n_slabs, -1, dtype=np.int64)
    slab_count = np.zeros(n_slabs, dtype=np.int64)
    placed = np.full(n_ops, -1, dtype=np.int64)
    allocated = np.zeros(n_ops, dtype=np.int64)
    free_blocks = np.zeros(n_ops, dtype=np.int64)
    residue = np.zeros(n_ops, dtype=np.int64)
    free_slabs = np.zeros(n_ops, dtype=np.int64)
    a = 0
    fb = 0
    rs = 0
    nfree = n_slabs
    first_error = -1
    for op in range(n_ops):
        k = key_idx[op]
        if kinds[op] == 0:
            chosen = -1
            for s in range(n_slabs):
                if slab_key[s] == k and slab_count[s] < bps[k]:
                    chosen = s
                    break
            if chosen < 0:
                for s in range(n_slabs):
                    if slab_key[s] < 0:
                        chosen = s
                        break
                if chosen >= 0:
                    slab_key[chosen] = k
                    nfree -= 1
                    fb += bps[k] * key_bytes[k]
                    rs += slab_size - bps[k] * key_bytes[k]
            if chosen >= 0:
                slab_count[chosen] += 1
                a += key_bytes[k]
                fb -= key_bytes[k]
            placed[op] = chosen
        else:
            s = placed[target[op]]
            if s < 0 or slab_key[s] != k or slab_count[s] == 0:
                if first_error < 0:
                    first_error = op
            else:
                placed[op] = s
                slab_count[s] -= 1
                a -= key_bytes[k]
                fb += key_bytes[k]
                if slab_count[s] == 0:
                    slab_key[s] = -1
                    nfree += 1
                    fb -= bps[k] * key_bytes[k]
                    rs -= slab_size - bps[k] * key_bytes[k]
        allocated[op] = a
        free_blocks[op] = fb
        residue[op] = rs
        free_slabs[op] = nfree
    return placed, allocated, free_blocks, residue, free_slabs * slab_size, first_error


def whole_slab_replay_numpy(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size):
    """Replay an alloc/free stream on a slab-count-only reference allocator.

    Returns ``(placed, allocated, free_block, residue, free_slab, first_error)``:
    ``placed[i]`` is the slab an op touched (``-1`` for a failed alloc) and
    the four byte arrays hold the accounting after each op.  ``first_error``
    is the index of the first free that does not match a live allocation.
    """
    kinds = np.asarray(kinds)
    key_idx = np.asarray(key_idx, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    bps = [int(b) for b in bps]
    key_bytes = [int(k) for k in key_bytes]
    n_ops = kinds.shape[0]
    slab_key = np.full(n_slabs, -1, dtype=np.int64)
    slab_count = np.zeros(n_slabs, dtype=np.int64)
    placed = np.full(n_ops, -1, dtype=np.int64)
    out = np.zeros((4, n_ops), dtype=np.int64)
    a = fb = rs = 0
    nfree = n_slabs
    first_error = -1
    # python ints for the scalar bookkeeping; numpy only for slab search
    for op, (kind, k, tgt) in enumerate(zip(kinds.tolist(), key_idx.tolist(), target.tolist())):
        if kind == OP_ALLOC:
            hit = np.flatnonzero((slab_key == k) & (slab_count < bps[k]))
            if hit.size == 0:
                hit = np.flatnonzero(slab_key < 0)
                if hit.size:
                    slab_key[hit[0]] = k
                    nfree -= 1
                    fb += bps[k] * key_bytes[k]
                    rs += slab_size - bps[k] * key_bytes[k]
            if hit.size:
                s = int(hit[0])
                slab_count[s] += 1
                a += key_bytes[k]
                fb -= key_bytes[k]
                placed[op] = s
        else:
            s = int(placed[tgt])
            if s < 0 or slab_key[s] != k or slab_count[s] == 0:
                if first_error < 0:
                    first_error = op
            else:
                placed[op] = s
                slab_count[s] -= 1
                a -= key_bytes[k]
                fb += key_bytes[k]
                if slab_count[s] == 0:
                    slab_key[s] = -1
                    nfree += 1
                    fb -= bps[k] * key_bytes[k]
                    rs -= slab_size - bps[k] * key_bytes[k]
        out[:, op] = (a, fb, rs, nfree * slab_size)
    return placed, out[0], out[1], out[2], out[3], first_error


# --------------------------------------------------------------------------
# dispatch

if HAVE_NUMBA:
    grid_allocation_max_numba = numba.njit(cache=True)(_grid_max_loop)
    _max_ontime_numba = numba.njit(cache=True)(_max_ontime_loop)
    _replay_numba = numba.njit(cache=True)(_replay_loop)

    def max_ontime_subset_numba(proc, deadlines, start=0.0):
        return int(
            _max_ontime_numba(
                np.asarray(proc, dtype=np.float64),
                np.asarray(deadlines, dtype=np.float64),
                float(start),
            )
        )

    def whole_slab_replay_numba(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size):
        res = _replay_numba(
            np.asarray(kinds, dtype=np.int8),
            np.asarray(key_idx, dtype=np.int64),
            np.asarray(target, dtype=np.int64),
            int(n_slabs),
            np.asarray(bps, dtype=np.int64),
            np.asarray(key_bytes, dtype=np.int64),
            int(slab_size),
        )
        return res[:5] + (int(res[5]),)
else:  # pragma: no cover
    grid_allocation_max_numba = None
    max_ontime_subset_numba = None
    whole_slab_replay_numba = None


def grid_allocation_max(mu, units):
    mu = np.asarray(mu, dtype=np.float64)
    if numba_enabled():
        if units < mu.shape[0]:
            raise ValueError("need at least one grid unit per model")
        return float(grid_allocation_max_numba(mu, int(units)))
    return grid_allocation_max_numpy(mu, units)


def max_ontime_subset(proc, deadlines, start=0.0):
    if numba_enabled():
        return max_ontime_subset_numba(proc, deadlines, start)
    return max_ontime_subset_numpy(proc, deadlines, start)


def whole_slab_replay(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size):
    if numba_enabled():
        return whole_slab_replay_numba(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size)
    return whole_slab_replay_numpy(kinds, key_idx, target, n_slabs, bps, key_bytes, slab_size)


def backend() -> str:
    return "numba" if numba_enabled() else "numpy"
