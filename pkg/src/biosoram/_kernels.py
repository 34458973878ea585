"""Compiled inner loops (numba).

Everything here is plain loop code over int64 arrays so it can also run
uncompiled with NUMBA_DISABLE_JIT=1 when debugging.
"""

import numpy as np
from numba import njit

# digest arithmetic: two lanes modulo the Mersenne prime 2^31-1
P = 2147483647
H1 = 1000003
H2 = 998244353
K1 = 65537
K2 = 2147483629

READ, WRITE = 0, 1

# element columns
KIND, IDENT, KEY, AUX, BODY = 0, 1, 2, 3, 4
# element kinds
PAD, ITEM, NODE, LDUMMY, TOMB, NEWD = 0, 1, 2, 3, 4, 5
# item classes (AUX of ITEM/TOMB rows)
REAL, ORIG = 1, 2
# key used for padding slots in routing tables
INF = 1 << 62

# access op codes and statuses
OP_GET, OP_PUT, OP_NOOP = 0, 1, 2
ST_NONE, ST_OK, ST_DUP, ST_FULL = 0, 1, 2, 3


@njit(cache=True)
def _shape_code(d, length, label):
    return 1 + d + 2 * length + (label << 18)


@njit(cache=True)
def _full_code(s, rel, regidx):
    return (s + (K1 * (rel % P)) % P + (K2 * regidx) % P) % P


@njit(cache=True)
def fold_event(dig, d, rel, length, label, regidx):
    s = _shape_code(d, length, label)
    f = _full_code(s, rel, regidx)
    dig[0] = (dig[0] * H1 + s) % P
    dig[1] = (dig[1] * H2 + s) % P
    dig[2] = (dig[2] * H1 + f) % P
    dig[3] = (dig[3] * H2 + f) % P


@njit(cache=True)
def sequence_fold(dirs, rels, lengths, label, regidx):
    """[mult, add] per digest lane for a fixed event sequence in one region."""
    out = np.zeros(8, dtype=np.int64)
    dig = np.zeros(4, dtype=np.int64)
    for t in range(len(dirs)):
        fold_event(dig, dirs[t], rels[t], lengths[t], label, regidx)
    for lane in range(4):
        h = H1 if lane % 2 == 0 else H2
        pw = 1
        for t in range(len(dirs)):
            pw = (pw * h) % P
        out[2 * lane] = pw
        out[2 * lane + 1] = dig[lane]
    return out


@njit(cache=True)
def apply_fold(dig, f):
    for lane in range(4):
        dig[lane] = ((dig[lane] * f[2 * lane]) % P + f[2 * lane + 1]) % P


@njit(cache=True)
def schedule_fold(dirs, offsets, lengths):
    """Per lane: [H0, G, LOC, H^len] for a label/region-free schedule."""
    out = np.zeros(8, dtype=np.int64)
    for lane in range(2):
        h = H1 if lane == 0 else H2
        h0 = 0
        g = 0
        loc = 0
        pw = 1
        for t in range(len(dirs)):
            s0 = 1 + dirs[t] + 2 * lengths[t]
            h0 = (h0 * h + s0) % P
            g = (g * h + 1) % P
            loc = (loc * h + (K1 * (offsets[t] % P)) % P) % P
            pw = (pw * h) % P
        out[4 * lane + 0] = h0
        out[4 * lane + 1] = g
        out[4 * lane + 2] = loc
        out[4 * lane + 3] = pw
    return out


@njit(cache=True)
def fold_schedule(dig, fold, label, regidx, rel_base):
    lab = (label << 18) % P
    extra = ((K1 * (rel_base % P)) % P + (K2 * regidx) % P) % P
    for lane in range(2):
        h0 = fold[4 * lane + 0]
        g = fold[4 * lane + 1]
        loc = fold[4 * lane + 2]
        pw = fold[4 * lane + 3]
        shape_tail = (h0 + (lab * g) % P) % P
        dig[lane] = ((dig[lane] * pw) % P + shape_tail) % P
        full_tail = (shape_tail + loc + (extra * g) % P) % P
        dig[2 + lane] = ((dig[2 + lane] * pw) % P + full_tail) % P


@njit(cache=True)
def last_write(dirs, offsets, lengths, elem_words, count):
    """Ordinal (among writes) of the last write covering each element, or -1."""
    out = np.full(count, -1, dtype=np.int64)
    w = 0
    for t in range(len(dirs)):
        if dirs[t] == WRITE:
            a = offsets[t] // elem_words
            b = a + lengths[t] // elem_words
            for e in range(a, b):
                out[e] = w
            w += 1
    return out


@njit(cache=True)
def network_pairs(nb):
    """Comparator pairs (i < l) of a bitonic network on nb blocks.

    Uses the mirrored first stage of each merge so that every comparator
    sends the smaller half to the lower index; pairs touching a virtual
    block at index >= nb are omitted, which keeps arbitrary nb correct.
    """
    p2 = 1
    lg = 0
    while p2 < nb:
        p2 *= 2
        lg += 1
    cap = (p2 // 2) * (lg * (lg + 1) // 2) + 1
    lo = np.empty(cap, dtype=np.int64)
    hi = np.empty(cap, dtype=np.int64)
    n = 0
    k = 2
    while k <= p2:
        j = k
        while j >= 1:
            for i in range(p2):
                partner = i ^ (k - 1) if j == k else i ^ j
                if partner > i and partner < nb:
                    lo[n] = i
                    hi[n] = partner
                    n += 1
            j = k // 4 if j == k else j // 2
        k *= 2
    return lo[:n].copy(), hi[:n].copy()


@njit(cache=True)
def network_events(count, unit, elem_words, lo, hi):
    """Event list (dir, word offset, len) of the block network schedule."""
    nb = (count + unit - 1) // unit
    n = 2 * nb + 4 * len(lo)
    dirs = np.empty(n, dtype=np.int64)
    offs = np.empty(n, dtype=np.int64)
    lens = np.empty(n, dtype=np.int64)
    t = 0
    for b in range(nb):
        a = b * unit
        c = min(count, a + unit) - a
        for d in range(2):
            dirs[t] = d
            offs[t] = a * elem_words
            lens[t] = c * elem_words
            t += 1
    for p in range(len(lo)):
        for d in range(2):
            for b in (lo[p], hi[p]):
                a = b * unit
                c = min(count, a + unit) - a
                dirs[t] = d
                offs[t] = a * elem_words
                lens[t] = c * elem_words
                t += 1
    return dirs, offs, lens


@njit(cache=True)
def _emit(ev, nev, record, d, addr, rel, length, label, regidx, version, counters, dig):
    fold_event(dig, d, rel, length, label, regidx)
    counters[0] += 1
    counters[1 + d] += 1
    counters[3 + label] += 1
    if record:
        ev[nev, 0] = d
        ev[nev, 1] = addr
        ev[nev, 2] = length
        ev[nev, 3] = label
        ev[nev, 4] = version
        return nev + 1
    return nev


@njit(cache=True)
def _seen(seen, st, pos):
    if seen[pos] == st[4]:
        st[5] += 1
    else:
        seen[pos] = st[4]


@njit(cache=True)
def small_access(shuf, cache, cache_ver, cfg, st, keys, ops, vals, classes, status, outv, start, stop,
                 ev, counters, dig, clock, seen, cfold):
    """Run accesses keys[start:stop] until done or the epoch is exhausted.

    cfg: d, R, E, per_block, b_prime, shuf_base, shuf_label, shuf_regidx,
         cache_base, cache_label, cache_regidx, record, cap
    st:  epoch position, dummy cursor, live count, (unused), epoch id,
         distinct-slot violations
    cfold: per level, the digest fold of that level's cache read
    Returns (next index, events recorded).
    """
    d = cfg[0]
    R = cfg[1]
    E = cfg[2]
    pb = cfg[3]
    bp = cfg[4]
    sbase = cfg[5]
    slab = cfg[6]
    sreg = cfg[7]
    cbase = cfg[8]
    clab = cfg[9]
    creg = cfg[10]
    record = cfg[11]
    cap = cfg[12]
    span = 2 * R
    nc = (span + pb - 1) // pb
    fresh = np.zeros(d + 1, dtype=np.int64)
    slot = np.zeros(d + 1, dtype=np.int64)
    nev = 0
    i = start
    while i < stop and st[0] < R:
        j = st[0]
        k = keys[i]
        op = ops[i]
        if op == OP_PUT and st[2] >= cap:
            status[i] = ST_FULL
            op = OP_NOOP
        nev = _emit(ev, nev, record, READ, cbase, 0, E, clab, creg, 0, counters, dig)
        node = cache[0]
        for lvl in range(1, d + 1):
            ls = 1 + (lvl - 1) * span
            # the wholesale cache read is the same event run on every access
            apply_fold(dig, cfold[lvl])
            counters[0] += nc
            counters[1] += nc
            counters[3 + clab] += nc
            if record:
                for m in range(nc):
                    off = m * pb
                    ev[nev, 0] = READ
                    ev[nev, 1] = cbase + (ls + off) * E
                    ev[nev, 2] = min(pb, span - off) * E
                    ev[nev, 3] = clab
                    ev[nev, 4] = 0
                    nev += 1
            c = node[AUX]
            t = 0
            for q in range(1, c):
                if node[BODY + q] <= k:
                    t = q
            target = node[BODY + bp + t]
            hit = -1
            for s in range(2 * j):
                if cache[ls + s, IDENT] == target:
                    hit = s
                    break
            if hit >= 0:
                cur = st[1]
                _seen(seen, st, cur)
                nev = _emit(ev, nev, record, READ, sbase + cur * E, cur * E, E, slab, sreg, 0, counters, dig)
                st[1] = shuf[cur, AUX]
                node = cache[ls + hit]
                fresh[lvl] = 0
            else:
                _seen(seen, st, target)
                nev = _emit(ev, nev, record, READ, sbase + target * E, target * E, E, slab, sreg, 0,
                            counters, dig)
                node = shuf[target]
                fresh[lvl] = 1
            slot[lvl] = target
        # node is now the level-d element on the search path
        ls = 1 + (d - 1) * span
        latest = -1
        for s in range(2 * j - 1, -1, -1):
            row = cache[ls + s]
            if (row[KIND] == ITEM or row[KIND] == TOMB) and row[KEY] == k:
                latest = s
                break
        src = 0
        if latest >= 0:
            if cache[ls + latest, KIND] == ITEM:
                src = 2
        elif fresh[d] == 1 and node[KIND] == ITEM and node[KEY] == k:
            src = 1
        if op == OP_GET:
            if src > 0:
                srow = cache[ls + latest] if src == 2 else node
                for w in range(2 * bp):
                    outv[i, w] = srow[BODY + w]
                status[i] = ST_OK
                st[2] -= 1
            else:
                status[i] = ST_NONE
        elif op == OP_PUT:
            if src > 0:
                status[i] = ST_DUP
            else:
                status[i] = ST_OK
                st[2] += 1
        for lvl in range(d, 0, -1):
            pos = 1 + (lvl - 1) * span + 2 * j
            a = cache[pos]
            b = cache[pos + 1]
            if fresh[lvl] == 1:
                a[:] = shuf[slot[lvl]]
                if lvl == d and op == OP_GET and src == 1:
                    a[KIND] = TOMB
            else:
                a[:] = 0
                a[IDENT] = -1
            b[:] = 0
            b[IDENT] = -1
            if lvl == d:
                if op == OP_PUT and status[i] == ST_OK:
                    b[KIND] = ITEM
                    b[IDENT] = -1
                    b[KEY] = k
                    b[AUX] = classes[i]
                    for w in range(2 * bp):
                        b[BODY + w] = vals[i, w]
                elif op == OP_GET and src == 2:
                    b[KIND] = TOMB
                    b[IDENT] = -1
                    b[KEY] = k
            clock[0] += 1
            cache_ver[pos] = clock[0]
            cache_ver[pos + 1] = clock[0]
            rel = pos * E
            nev = _emit(ev, nev, record, WRITE, cbase + rel, rel, 2 * E, clab, creg, clock[0], counters, dig)
        st[0] += 1
        i += 1
    return i, nev


@njit(cache=True)
def build_tree(keys_sorted, m, slots, d, bp):
    """Level sizes and per-element routing data of the padded tree.

    Returns (level_count[0..d], level_offset[0..d], minkey per logical
    element).  Level d holds ``slots`` item slots, the first ``m`` real.
    Logical order: items, then levels d-1 .. 1; the root (level 0) is
    not part of the shuffled array.
    """
    cnt = np.zeros(d + 1, dtype=np.int64)
    cnt[d] = slots
    for lvl in range(d - 1, -1, -1):
        cnt[lvl] = (cnt[lvl + 1] + bp - 1) // bp
    off = np.zeros(d + 1, dtype=np.int64)
    acc = 0
    for lvl in range(d, 0, -1):
        off[lvl] = acc
        acc += cnt[lvl]
    off[0] = acc
    minkey = np.empty(acc + 1, dtype=np.int64)
    for x in range(slots):
        minkey[x] = keys_sorted[x] if x < m else INF
    for lvl in range(d - 1, -1, -1):
        for x in range(cnt[lvl]):
            minkey[off[lvl] + x] = minkey[off[lvl + 1] + x * bp]
    return cnt, off, minkey


@njit(cache=True)
def fill_nodes(nodes, count, child_count, child_off, pos, minkey, bp):
    """Write inner-node rows: kind, fan-out, child min-keys and child slots."""
    for x in range(count):
        row = nodes[x]
        row[KIND] = NODE
        first = x * bp
        row[AUX] = min(bp, child_count - first)
        for q in range(bp):
            child = first + q
            if child < child_count:
                row[BODY + q] = minkey[child_off + child]
                row[BODY + bp + q] = pos[child_off + child]
            else:
                row[BODY + q] = INF
                row[BODY + bp + q] = -1
