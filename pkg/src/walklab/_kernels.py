"""Compiled inner loops for walk ensembles.

Design constraints, in order:

 1. Determinism. Replica r of seed s draws from the counter stream keyed by
    (s, r) -- the same family as ``rng.py`` -- so results are independent of
    scheduling and thread count. Parallel kernels either write disjoint
    per-replica output rows or accumulate integers per chunk; both merge
    order-independently.
 2. Throughput. A lazy walk in d = 5 needs ~stop_radius**2 steps to leave the
    truncation ball, and the acceptance runs ask for 1e6 replicas, so the
    stepping loop has to stay in the tens-of-ns-per-step range.
 3. No clever numerics here: everything statistical (standard errors, bias
    certificates, fits) lives in the plain-Python modules.

Coordinates are packed into int64 keys at 12 bits per axis, which caps the
pair kernels at dim <= 5 and |coordinate| <= 2047; the wrappers enforce this.
"""

from __future__ import annotations

import math
import os

import numpy as np

# the portable threading layer; keeps an outdated host TBB from being probed
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from numba import njit, prange

U64_1 = np.uint64(1)
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = np.uint64(0x5851F42D4C957F2D)
_U53 = 1.0 / 9007199254740992.0

FLAG_STEP_CAP = 1
FLAG_TILT_CAP = 2
FLAG_BUFFER_CAP = 4
FLAG_WEIGHT_RANGE = 8

_PACK_BITS = 12
_PACK_SHIFT = 2048
_PACK_MASK = (1 << _PACK_BITS) - 1


@njit(cache=True, inline="always")
def _mix64(x):
    x ^= x >> np.uint64(30)
    x *= _MIX_A
    x ^= x >> np.uint64(27)
    x *= _MIX_B
    x ^= x >> np.uint64(31)
    return x


@njit(cache=True, inline="always")
def _stream_key(seed, stream):
    return _mix64(_mix64(np.uint64(seed)) ^ _mix64(np.uint64(stream) ^ _STREAM_SALT))


@njit(cache=True, inline="always")
def _draw(key, counter):
    return _mix64(key + counter * GOLDEN)


@njit(cache=True, inline="always")
def _uniform01(u):
    return np.float64(u >> np.uint64(11)) * _U53


@njit(cache=True)
def stream_key_jit(seed, stream):
    # exported for cross-checking against rng.stream_key
    return _stream_key(seed, stream)


@njit(cache=True)
def stream_uints_jit(seed, stream, start, count):
    out = np.empty(count, np.uint64)
    key = _stream_key(seed, stream)
    c = np.uint64(start)
    for i in range(count):
        c += U64_1
        out[i] = _draw(key, c)
    return out


# ---------------------------------------------------------------------------
# lattice stepping primitives
# ---------------------------------------------------------------------------
#
# Move decode for the lazy walk with 2d+1 moves: index m in [0, 2d+1);
# m == 2d is the lazy stay, otherwise axis m >> 1 moves by +1 (m odd) or
# -1 (m even).


@njit(cache=True, inline="always")
def _plain_move(u, n_moves):
    m = np.int64(_uniform01(u) * n_moves)
    if m >= n_moves:
        m = n_moves - 1
    return m


@njit(cache=True, inline="always")
def _apply_move(pos, m, dim, normsq):
    # returns updated |pos|^2; mutates pos in place
    if m == 2 * dim:
        return normsq
    axis = m >> 1
    delta = np.int64(1) if (m & 1) == 1 else np.int64(-1)
    old = pos[axis]
    pos[axis] = old + delta
    return normsq + 2 * old * delta + 1


@njit(cache=True, inline="always")
def _pack(pos, dim):
    key = np.int64(0)
    for i in range(dim):
        key |= (pos[i] + _PACK_SHIFT) << (_PACK_BITS * i)
    return key


# ---------------------------------------------------------------------------
# open-addressing visit tables (stamp-versioned so they are reused per pair
# without clearing)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _ht_slot(keys, stamps, stamp, mask, key):
    h = np.uint64(key) * np.uint64(0xFF51AFD7ED558CCD)
    slot = np.int64(h & np.uint64(mask))
    while True:
        if stamps[slot] != stamp:
            return slot, False
        if keys[slot] == key:
            return slot, True
        slot = (slot + 1) & mask


@njit(cache=True, inline="always")
def _ht_add(keys, counts, stamps, stamp, mask, key, inc):
    slot, found = _ht_slot(keys, stamps, stamp, mask, key)
    if found:
        counts[slot] += inc
    else:
        stamps[slot] = stamp
        keys[slot] = key
        counts[slot] = inc
    return slot, found


@njit(cache=True, inline="always")
def _ht_get(keys, counts, stamps, stamp, mask, key):
    slot, found = _ht_slot(keys, stamps, stamp, mask, key)
    if found:
        return counts[slot]
    return np.int64(0)


# ---------------------------------------------------------------------------
# reduced Green-table lookups (shared with green.py, which builds the table)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _canon_rank(pos, scratch, dim, box_radius, binom):
    """Rank of |pos| sorted ascending in the fundamental domain, or -1.

    The fundamental domain of the hypercubic symmetry group is the set of
    nondecreasing nonnegative tuples; ranking is the colex combinadic of the
    strictly increasing tuple c_i = z_i + i.
    """
    for i in range(dim):
        v = pos[i]
        if v < 0:
            v = -v
        if v > box_radius:
            return np.int64(-1)
        scratch[i] = v
    for i in range(1, dim):
        v = scratch[i]
        j = i - 1
        while j >= 0 and scratch[j] > v:
            scratch[j + 1] = scratch[j]
            j -= 1
        scratch[j + 1] = v
    rank = np.int64(0)
    for i in range(dim):
        rank += binom[scratch[i] + i, i + 1]
    return rank


@njit(cache=True, inline="always")
def _green_ext(pos, scratch, dim, box_radius, table, binom, asym_c):
    """Green value from the reduced table, power-law continuation outside."""
    rank = _canon_rank(pos, scratch, dim, box_radius, binom)
    if rank >= 0:
        return table[rank]
    s = 0.0
    for i in range(dim):
        s += np.float64(pos[i]) * np.float64(pos[i])
    return asym_c * s ** (0.5 * (2.0 - dim))


@njit(cache=True)
def canon_ranks_bulk(sites, dim, box_radius, binom):
    n = sites.shape[0]
    out = np.empty(n, np.int64)
    scratch = np.empty(dim, np.int64)
    for i in range(n):
        out[i] = _canon_rank(sites[i], scratch, dim, box_radius, binom)
    return out


# ---------------------------------------------------------------------------
# assembly of the symmetry-reduced absorbing-box system
# ---------------------------------------------------------------------------


@njit(cache=True)
def assemble_reduced_box_system(dim, box_radius, binom, n_reps):
    """COO data of (I - P) restricted to the fundamental domain.

    Row i is the balance equation at the i-th nondecreasing tuple; exterior
    neighbors are dropped (absorbing boundary). Also returns orbit sizes and
    |z|^2 per representative, used for symmetrization and radial envelopes.
    """
    n_moves = 2 * dim + 1
    stride = 2 * dim
    rows = np.empty(n_reps * (stride + 1), np.int32)
    cols = np.empty(n_reps * (stride + 1), np.int32)
    vals = np.zeros(n_reps * (stride + 1), np.float64)
    orbit = np.empty(n_reps, np.float64)
    normsq = np.empty(n_reps, np.int64)

    fact = np.ones(dim + 1, np.float64)
    for i in range(1, dim + 1):
        fact[i] = fact[i - 1] * i

    z = np.zeros(dim, np.int64)
    nbr = np.empty(dim, np.int64)
    scratch = np.empty(dim, np.int64)
    p = 1.0 / n_moves

    for r in range(n_reps):
        base = r * (stride + 1)
        rows[base : base + stride + 1] = r
        cols[base] = r
        vals[base] = 1.0 - p  # diagonal: 1 - lazy stay

        s = np.int64(0)
        for i in range(dim):
            s += z[i] * z[i]
        normsq[r] = s

        # orbit size: sign flips on nonzero coords x permutations / multiplicities
        nz = 0
        for i in range(dim):
            if z[i] != 0:
                nz += 1
        o = fact[dim] * (2.0**nz)
        run = 1
        for i in range(1, dim):
            if z[i] == z[i - 1]:
                run += 1
            else:
                o /= fact[run]
                run = 1
        o /= fact[run]
        orbit[r] = o

        slot = 1
        for axis in range(dim):
            for delta in (-1, 1):
                for i in range(dim):
                    nbr[i] = z[i]
                nbr[axis] += delta
                c = _canon_rank(nbr, scratch, dim, box_radius, binom)
                if c >= 0:
                    cols[base + slot] = c
                    vals[base + slot] = -p
                else:
                    cols[base + slot] = r  # absorbed: harmless zero entry
                    vals[base + slot] = 0.0
                slot += 1

        # colex successor, matching _canon_rank's combinadic ordering:
        # bump the lowest coordinate that stays nondecreasing, zero the rest
        j = 0
        while j < dim:
            nxt = box_radius if j == dim - 1 else z[j + 1]
            if z[j] + 1 <= nxt:
                break
            j += 1
        if j == dim:
            break
        z[j] += 1
        for i in range(j):
            z[i] = 0

    return rows, cols, vals, orbit, normsq


@njit(cache=True)
def reduced_normsq(dim, box_radius, n_reps):
    """|z|^2 per fundamental-domain representative, in rank order."""
    normsq = np.empty(n_reps, np.int64)
    z = np.zeros(dim, np.int64)
    for r in range(n_reps):
        s = np.int64(0)
        for i in range(dim):
            s += z[i] * z[i]
        normsq[r] = s
        j = 0
        while j < dim:
            nxt = box_radius if j == dim - 1 else z[j + 1]
            if z[j] + 1 <= nxt:
                break
            j += 1
        if j == dim:
            break
        z[j] += 1
        for i in range(j):
            z[i] = 0
    return normsq


@njit(cache=True)
def reduced_orbit_normsq(dim, box_radius, n_reps):
    """Orbit size and |z|^2 per fundamental-domain representative."""
    orbit = np.empty(n_reps, np.float64)
    normsq = np.empty(n_reps, np.int64)
    fact = np.ones(dim + 1, np.float64)
    for i in range(1, dim + 1):
        fact[i] = fact[i - 1] * i
    z = np.zeros(dim, np.int64)
    for r in range(n_reps):
        s = np.int64(0)
        nz = 0
        for i in range(dim):
            s += z[i] * z[i]
            if z[i] != 0:
                nz += 1
        normsq[r] = s
        o = fact[dim] * (2.0**nz)
        run = 1
        for i in range(1, dim):
            if z[i] == z[i - 1]:
                run += 1
            else:
                o /= fact[run]
                run = 1
        o /= fact[run]
        orbit[r] = o
        j = 0
        while j < dim:
            nxt = box_radius if j == dim - 1 else z[j + 1]
            if z[j] + 1 <= nxt:
                break
            j += 1
        if j == dim:
            break
        z[j] += 1
        for i in range(j):
            z[i] = 0
    return orbit, normsq


# ---------------------------------------------------------------------------
# visit-count ensembles
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def target_visit_counts(
    dim, seed, first_stream, n_replicas, stop_radius_sq, lookup, bb_lo, bb_hi, bb_strides, n_targets, max_steps
):
    """Per-replica visit counts at a small list of target sites.

    ``lookup`` is a dense int32 map over the targets' bounding box, holding
    the target index or -1; positions outside the box are never targets.
    Counting starts at time 0 (the origin is counted if it is a target).
    """
    counts = np.zeros((n_replicas, n_targets), np.int32)
    flags = np.zeros(n_replicas, np.uint8)
    n_moves = 2 * dim + 1
    for rep in prange(n_replicas):
        pos = np.zeros(dim, np.int64)
        key = _stream_key(seed, first_stream + rep)
        counter = np.uint64(0)
        normsq = np.int64(0)

        inside = True
        flat = np.int64(0)
        for i in range(dim):
            if pos[i] < bb_lo[i] or pos[i] > bb_hi[i]:
                inside = False
            else:
                flat += (pos[i] - bb_lo[i]) * bb_strides[i]
        if inside:
            t = lookup[flat]
            if t >= 0:
                counts[rep, t] += 1

        steps = 0
        while normsq <= stop_radius_sq:
            if steps >= max_steps:
                flags[rep] |= FLAG_STEP_CAP
                break
            counter += U64_1
            m = _plain_move(_draw(key, counter), n_moves)
            normsq = _apply_move(pos, m, dim, normsq)
            steps += 1
            inside = True
            flat = np.int64(0)
            for i in range(dim):
                if pos[i] < bb_lo[i] or pos[i] > bb_hi[i]:
                    inside = False
                    break
                flat += (pos[i] - bb_lo[i]) * bb_strides[i]
            if inside:
                t = lookup[flat]
                if t >= 0:
                    counts[rep, t] += 1
    return counts, flags


@njit(cache=True, parallel=True)
def box_visit_moments(dim, seed, first_stream, n_replicas, stop_radius_sq, box_radius, n_chunks, max_steps, visit_cap):
    """Sum and sum-of-squares of per-replica visit counts on a dense box.

    Output site order is C order of the box [-box_radius, box_radius]^dim.
    Integer accumulators per chunk keep the merge exact and order-free.
    """
    side = 2 * box_radius + 1
    n_sites = side**dim
    sums = np.zeros((n_chunks, n_sites), np.int64)
    sumsq = np.zeros((n_chunks, n_sites), np.int64)
    capped = np.zeros(n_chunks, np.int64)
    stepcapped = np.zeros(n_chunks, np.int64)
    n_moves = 2 * dim + 1

    for chunk in prange(n_chunks):
        lo = (n_replicas * chunk) // n_chunks
        hi = (n_replicas * (chunk + 1)) // n_chunks
        pos = np.zeros(dim, np.int64)
        buf = np.empty(visit_cap, np.int64)
        for rep in range(lo, hi):
            key = _stream_key(seed, first_stream + rep)
            counter = np.uint64(0)
            for i in range(dim):
                pos[i] = 0
            normsq = np.int64(0)
            nv = 0
            n_out = 0  # coords outside the output box

            flat = np.int64(0)
            for i in range(dim):
                flat = flat * side + (pos[i] + box_radius)
            buf[nv] = flat
            nv += 1

            steps = 0
            while normsq <= stop_radius_sq:
                if steps >= max_steps:
                    stepcapped[chunk] += 1
                    break
                counter += U64_1
                m = _plain_move(_draw(key, counter), n_moves)
                if m != 2 * dim:
                    axis = m >> 1
                    delta = np.int64(1) if (m & 1) == 1 else np.int64(-1)
                    old = pos[axis]
                    was_out = old < -box_radius or old > box_radius
                    pos[axis] = old + delta
                    now_out = pos[axis] < -box_radius or pos[axis] > box_radius
                    if was_out and not now_out:
                        n_out -= 1
                    elif now_out and not was_out:
                        n_out += 1
                    normsq += 2 * old * delta + 1
                steps += 1
                if n_out == 0:
                    if nv < visit_cap:
                        flat = np.int64(0)
                        for i in range(dim):
                            flat = flat * side + (pos[i] + box_radius)
                        buf[nv] = flat
                        nv += 1
                    else:
                        capped[chunk] += 1

            # insertion sort + run-length add (visit lists are short)
            for a in range(1, nv):
                v = buf[a]
                b = a - 1
                while b >= 0 and buf[b] > v:
                    buf[b + 1] = buf[b]
                    b -= 1
                buf[b + 1] = v
            a = 0
            while a < nv:
                b = a
                while b < nv and buf[b] == buf[a]:
                    b += 1
                c = np.int64(b - a)
                sums[chunk, buf[a]] += c
                sumsq[chunk, buf[a]] += c * c
                a = b

    total = np.zeros(n_sites, np.int64)
    totalsq = np.zeros(n_sites, np.int64)
    for chunk in range(n_chunks):
        for s in range(n_sites):
            total[s] += sums[chunk, s]
            totalsq[s] += sumsq[chunk, s]
    return total, totalsq, capped.sum(), stepcapped.sum()


@njit(cache=True, parallel=True)
def escape_counts(dim, seed, first_stream, sites, reps_per_site, stop_radius_sq, lookup, bb_lo, bb_hi, bb_strides, max_steps):
    """Escape counts per site of a finite set: walks from each site that exit
    the truncation ball before re-entering the set at a positive time."""
    n_sites = sites.shape[0]
    esc = np.zeros(n_sites, np.int64)
    stepcapped = np.zeros(n_sites, np.int64)
    n_moves = 2 * dim + 1
    for s in prange(n_sites):
        pos = np.zeros(dim, np.int64)
        for rep in range(reps_per_site):
            key = _stream_key(seed, first_stream + s * reps_per_site + rep)
            counter = np.uint64(0)
            normsq = np.int64(0)
            for i in range(dim):
                pos[i] = sites[s, i]
                normsq += pos[i] * pos[i]
            steps = 0
            trapped = False
            while normsq <= stop_radius_sq:
                if steps >= max_steps:
                    stepcapped[s] += 1
                    trapped = True  # conservative: do not count as escape
                    break
                counter += U64_1
                m = _plain_move(_draw(key, counter), n_moves)
                normsq = _apply_move(pos, m, dim, normsq)
                steps += 1
                inside = True
                flat = np.int64(0)
                for i in range(dim):
                    if pos[i] < bb_lo[i] or pos[i] > bb_hi[i]:
                        inside = False
                        break
                    flat += (pos[i] - bb_lo[i]) * bb_strides[i]
                if inside and lookup[flat] >= 0:
                    trapped = True
                    break
            if not trapped:
                esc[s] += 1
    return esc, stepcapped.sum()


@njit(cache=True, parallel=True)
def first_entry(dim, seed, first_stream, start, n_replicas, stop_radius_sq, lookup, bb_lo, bb_hi, bb_strides, max_steps):
    """Index of the first set site entered at positive time, -1 if the walk
    leaves the truncation ball first, -2 if the step cap was hit."""
    out = np.full(n_replicas, -1, np.int16)
    n_moves = 2 * dim + 1
    for rep in prange(n_replicas):
        pos = np.zeros(dim, np.int64)
        key = _stream_key(seed, first_stream + rep)
        counter = np.uint64(0)
        normsq = np.int64(0)
        for i in range(dim):
            pos[i] = start[i]
            normsq += pos[i] * pos[i]
        steps = 0
        while normsq <= stop_radius_sq:
            if steps >= max_steps:
                out[rep] = -2
                break
            counter += U64_1
            m = _plain_move(_draw(key, counter), n_moves)
            normsq = _apply_move(pos, m, dim, normsq)
            steps += 1
            inside = True
            flat = np.int64(0)
            for i in range(dim):
                if pos[i] < bb_lo[i] or pos[i] > bb_hi[i]:
                    inside = False
                    break
                flat += (pos[i] - bb_lo[i]) * bb_strides[i]
            if inside:
                t = lookup[flat]
                if t >= 0:
                    out[rep] = t
                    break
    return out


# ---------------------------------------------------------------------------
# paired-walk kernels
# ---------------------------------------------------------------------------
#
# One walk of a pair: runs until it leaves the truncation ball, recording
# local times in a stamp-versioned hash table. An optional return-biased
# tilt is active until the walk has made ``return_target`` visits to the
# origin (or the tilt step cap is hit); afterwards steps are plain. The
# log-likelihood ratio of plain vs tilted law is accumulated exactly.


@njit(cache=True)
def _run_one_walk(
    dim,
    key,
    stop_radius_sq,
    theta,
    return_target,
    tilt_max_steps,
    max_steps,
    gtable,
    binom,
    gbox_radius,
    asym_c,
    ht_keys,
    ht_counts,
    ht_stamps,
    stamp,
    mask,
    pos,
    scratch,
    wbuf,
    slots_used,
):
    n_moves = 2 * dim + 1
    counter = np.uint64(0)
    for i in range(dim):
        pos[i] = 0
    normsq = np.int64(0)
    logw = 0.0
    flag = np.uint8(0)
    returns = 0
    tilting = theta > 0.0 and return_target > 0
    log_nm = math.log(n_moves)
    n_used = 0

    slot, found = _ht_add(ht_keys, ht_counts, ht_stamps, stamp, mask, _pack(pos, dim), np.int64(1))
    slots_used[n_used] = slot
    n_used += 1
    steps = 0
    while normsq <= stop_radius_sq:
        if steps >= max_steps:
            flag |= FLAG_STEP_CAP
            break
        counter += U64_1
        u64 = _draw(key, counter)
        if not tilting:
            m = _plain_move(u64, n_moves)
            normsq = _apply_move(pos, m, dim, normsq)
        else:
            # tilted step: neighbor weights g(y)^theta, g from the table
            total = 0.0
            for m2 in range(n_moves):
                if m2 == 2 * dim:
                    g = _green_ext(pos, scratch, dim, gbox_radius, gtable, binom, asym_c)
                else:
                    axis = m2 >> 1
                    delta = np.int64(1) if (m2 & 1) == 1 else np.int64(-1)
                    pos[axis] += delta
                    g = _green_ext(pos, scratch, dim, gbox_radius, gtable, binom, asym_c)
                    pos[axis] -= delta
                w = g**theta
                wbuf[m2] = w
                total += w
            target = _uniform01(u64) * total
            acc = 0.0
            m = n_moves - 1
            for m2 in range(n_moves):
                acc += wbuf[m2]
                if target < acc:
                    m = m2
                    break
            # exact bookkeeping: log p_plain(m) - log p_tilt(m)
            logw += -log_nm - (math.log(wbuf[m]) - math.log(total))
            normsq = _apply_move(pos, m, dim, normsq)
            if normsq == 0:
                returns += 1
                if returns >= return_target:
                    tilting = False
            if steps >= tilt_max_steps and tilting:
                tilting = False
                flag |= FLAG_TILT_CAP
        steps += 1
        slot, found = _ht_add(ht_keys, ht_counts, ht_stamps, stamp, mask, _pack(pos, dim), np.int64(1))
        if not found:
            slots_used[n_used] = slot
            n_used += 1
            # keep the open-addressing load factor below 3/4 or probing degrades
            if 4 * n_used >= 3 * (mask + 1):
                flag |= FLAG_BUFFER_CAP
                break

    if logw > 500.0 or logw < -500.0:
        flag |= FLAG_WEIGHT_RANGE
    return logw, flag, n_used


@njit(cache=True, parallel=True)
def pair_intersections(
    dim,
    seed,
    first_stream,
    n_pairs,
    stop_radius_sq,
    q,
    theta,
    return_target,
    tilt_max_steps,
    max_steps,
    gtable,
    binom,
    gbox_radius,
    asym_c,
    table_bits,
    xis,
    n_chunks,
):
    """Per-pair intersection functionals of two independent walks.

    Returns, per pair: the quadratic intersection <l, l~>, the interpolated
    functional sum_z l(z) l~(z)^(q-1), the range-intersection volume, a
    directly-maintained "ever met" flag, inside-contributions for each
    threshold in ``xis`` (sites where both local times reach the threshold),
    the pair log-likelihood ratio, and diagnostic flags.
    """
    cap = 1 << table_bits
    mask = np.int64(cap - 1)
    n_xi = xis.shape[0]

    zeta2 = np.zeros(n_pairs, np.int64)
    zetaq = np.zeros(n_pairs, np.float64)
    rint = np.zeros(n_pairs, np.int32)
    met = np.zeros(n_pairs, np.uint8)
    inside = np.zeros((n_pairs, n_xi), np.int64)
    logw = np.zeros(n_pairs, np.float64)
    flags = np.zeros(n_pairs, np.uint8)

    for chunk in prange(n_chunks):
        lo = (n_pairs * chunk) // n_chunks
        hi = (n_pairs * (chunk + 1)) // n_chunks
        # hash tables reused across the chunk via stamp versioning
        ka = np.empty(cap, np.int64)
        ca = np.empty(cap, np.int64)
        sa = np.full(cap, -1, np.int64)
        kb = np.empty(cap, np.int64)
        cb = np.empty(cap, np.int64)
        sb = np.full(cap, -1, np.int64)
        slots_a = np.empty(cap, np.int64)
        slots_b = np.empty(cap, np.int64)
        pos = np.empty(dim, np.int64)
        scratch = np.empty(dim, np.int64)
        wbuf = np.empty(2 * dim + 1, np.float64)

        for pair in range(lo, hi):
            stamp = np.int64(pair)
            key_a = _stream_key(seed, first_stream + 2 * pair)
            key_b = _stream_key(seed, first_stream + 2 * pair + 1)
            lw_a, fl_a, used_a = _run_one_walk(
                dim, key_a, stop_radius_sq, theta, return_target, tilt_max_steps, max_steps,
                gtable, binom, gbox_radius, asym_c, ka, ca, sa, stamp, mask, pos, scratch, wbuf, slots_a,
            )
            lw_b, fl_b, used_b = _run_one_walk(
                dim, key_b, stop_radius_sq, theta, return_target, tilt_max_steps, max_steps,
                gtable, binom, gbox_radius, asym_c, kb, cb, sb, stamp, mask, pos, scratch, wbuf, slots_b,
            )
            logw[pair] = lw_a + lw_b
            flags[pair] = fl_a | fl_b

            z2 = np.int64(0)
            zq = 0.0
            ri = np.int32(0)
            for j in range(used_a):
                slot = slots_a[j]
                other = _ht_get(kb, cb, sb, stamp, mask, ka[slot])
                if other > 0:
                    la = ca[slot]
                    z2 += la * other
                    zq += la * np.float64(other) ** (q - 1.0)
                    ri += 1
                    for x in range(n_xi):
                        if la >= xis[x] and other >= xis[x]:
                            inside[pair, x] += la * other
            zeta2[pair] = z2
            zetaq[pair] = zq
            rint[pair] = ri
            # independent meet detector: opposite scan direction (B against A)
            for j in range(used_b):
                if _ht_get(ka, ca, sa, stamp, mask, kb[slots_b[j]]) > 0:
                    met[pair] = np.uint8(1)
                    break

    return zeta2, zetaq, rint, met, inside, logw, flags


@njit(cache=True, parallel=True)
def pair_level_sets(
    dim,
    seed,
    first_stream,
    n_pairs,
    stop_radius_sq,
    level_n,
    level_m,
    vol_min,
    theta,
    return_target,
    tilt_max_steps,
    max_steps,
    gtable,
    binom,
    gbox_radius,
    asym_c,
    table_bits,
    site_cap,
    n_chunks,
):
    """Volumes of {l = n} intersected with {l~ = m}, per pair, extracting the
    actual sites whenever the volume reaches ``vol_min``."""
    cap = 1 << table_bits
    mask = np.int64(cap - 1)

    vol = np.zeros(n_pairs, np.int32)
    logw = np.zeros(n_pairs, np.float64)
    flags = np.zeros(n_pairs, np.uint8)
    # per-pair extraction buffers, compacted by the caller
    site_counts = np.zeros(n_pairs, np.int32)
    sites = np.zeros((n_pairs, site_cap, dim), np.int16)

    for chunk in prange(n_chunks):
        lo = (n_pairs * chunk) // n_chunks
        hi = (n_pairs * (chunk + 1)) // n_chunks
        ka = np.empty(cap, np.int64)
        ca = np.empty(cap, np.int64)
        sa = np.full(cap, -1, np.int64)
        kb = np.empty(cap, np.int64)
        cb = np.empty(cap, np.int64)
        sb = np.full(cap, -1, np.int64)
        slots_a = np.empty(cap, np.int64)
        slots_b = np.empty(cap, np.int64)
        pos = np.empty(dim, np.int64)
        scratch = np.empty(dim, np.int64)
        wbuf = np.empty(2 * dim + 1, np.float64)

        for pair in range(lo, hi):
            stamp = np.int64(pair)
            key_a = _stream_key(seed, first_stream + 2 * pair)
            key_b = _stream_key(seed, first_stream + 2 * pair + 1)
            lw_a, fl_a, used_a = _run_one_walk(
                dim, key_a, stop_radius_sq, theta, return_target, tilt_max_steps, max_steps,
                gtable, binom, gbox_radius, asym_c, ka, ca, sa, stamp, mask, pos, scratch, wbuf, slots_a,
            )
            lw_b, fl_b, used_b = _run_one_walk(
                dim, key_b, stop_radius_sq, theta, return_target, tilt_max_steps, max_steps,
                gtable, binom, gbox_radius, asym_c, kb, cb, sb, stamp, mask, pos, scratch, wbuf, slots_b,
            )
            logw[pair] = lw_a + lw_b
            flags[pair] = fl_a | fl_b

            v = np.int32(0)
            nfound = np.int32(0)
            for j in range(used_a):
                slot = slots_a[j]
                if ca[slot] == level_n:
                    other = _ht_get(kb, cb, sb, stamp, mask, ka[slot])
                    if other == level_m:
                        if nfound < site_cap:
                            packed = ka[slot]
                            for i in range(dim):
                                c = np.int64((packed >> (_PACK_BITS * i)) & _PACK_MASK) - _PACK_SHIFT
                                sites[pair, nfound, i] = c
                        nfound += 1
                        v += 1
            vol[pair] = v
            if v >= vol_min:
                site_counts[pair] = v if v <= site_cap else site_cap
                if v > site_cap:
                    flags[pair] |= FLAG_BUFFER_CAP
            else:
                site_counts[pair] = 0

    return vol, logw, flags, site_counts, sites


@njit(cache=True, parallel=True)
def tilted_origin_walks(
    dim,
    seed,
    first_stream,
    n_replicas,
    stop_radius_sq,
    theta,
    return_target,
    tilt_max_steps,
    max_steps,
    gtable,
    binom,
    gbox_radius,
    asym_c,
    table_bits,
    n_chunks,
):
    """Single walks under the return-biased tilt: per replica, the origin
    local time (includes time 0), the log-likelihood ratio, and flags."""
    cap = 1 << table_bits
    mask = np.int64(cap - 1)
    origin_visits = np.zeros(n_replicas, np.int64)
    logw = np.zeros(n_replicas, np.float64)
    flags = np.zeros(n_replicas, np.uint8)

    for chunk in prange(n_chunks):
        lo = (n_replicas * chunk) // n_chunks
        hi = (n_replicas * (chunk + 1)) // n_chunks
        ka = np.empty(cap, np.int64)
        ca = np.empty(cap, np.int64)
        sa = np.full(cap, -1, np.int64)
        slots = np.empty(cap, np.int64)
        pos = np.empty(dim, np.int64)
        scratch = np.empty(dim, np.int64)
        wbuf = np.empty(2 * dim + 1, np.float64)
        zero = np.zeros(dim, np.int64)
        origin_key = _pack(zero, dim)

        for rep in range(lo, hi):
            stamp = np.int64(rep)
            key = _stream_key(seed, first_stream + rep)
            lw, fl, _used = _run_one_walk(
                dim, key, stop_radius_sq, theta, return_target, tilt_max_steps, max_steps,
                gtable, binom, gbox_radius, asym_c, ka, ca, sa, stamp, mask, pos, scratch, wbuf, slots,
            )
            logw[rep] = lw
            flags[rep] = fl
            origin_visits[rep] = _ht_get(ka, ca, sa, stamp, mask, origin_key)

    return origin_visits, logw, flags
