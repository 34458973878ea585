"""Oblivious storage for small sets: a padded B'-ary tree over a shuffled array.

Layout of one instance on the server:

* a ``shuffled-array`` region holding every tree element below the root
  plus the dummy list, in a random order fixed at build time;
* a ``cache`` region: the root element, then for each level 1..d a cache
  of 2*R slots (R = rebuild period), two slots written per access.

An access reads the root and every cache wholesale, and reads exactly one
never-touched slot of the shuffled array per level: the next path node if
it is not cached yet, otherwise the next element of the dummy list.  It then
writes two elements into every cache, leaf level first.  New items and
deletion markers live in the last cache until the next rebuild.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .oblivious import BulkIO, current_route
from .params import small_os_params

KIND, IDENT, KEY, AUX, BODY = K.KIND, K.IDENT, K.KEY, K.AUX, K.BODY
REAL, ORIG = K.REAL, K.ORIG
KEY_LIMIT = K.INF


class CapacityError(ValueError):
    pass


class DuplicateKey(KeyError):
    pass


class EpochExhausted(RuntimeError):
    """An instance without automatic rebuilds ran past its epoch budget."""


@dataclass(frozen=True)
class Item:
    key: int
    payload: tuple = ()
    kind: int = REAL


def tree_size(sp, slots):
    """Number of shuffled-array elements for a tree with ``slots`` item slots."""
    total = slots
    cnt = slots
    for _ in range(sp.d - 1):
        cnt = -(-cnt // sp.b_prime)
        total += cnt
    return total + sp.dummy_len


def _evbuf(server, rows):
    buf = getattr(server, "_small_evbuf", None)
    if buf is None or len(buf) < rows:
        buf = np.zeros((max(rows, 1), 5), dtype=np.int64)
        server._small_evbuf = buf
    return buf


class SmallOS:
    """One small-set oblivious store of up to ``sp.cap`` items.

    ``scratch`` is a region used by rebuilds; instances that never rebuild
    concurrently may share one.
    """

    def __init__(self, server, sp, rng, bulk=None, scratch=None, items=(), reserve=None, auto_rebuild=True):
        self.server = server
        self.auto_rebuild = auto_rebuild
        self.sp = sp
        self.rng = rng
        self.bulk = bulk or BulkIO(server, sp.per_block, sp.unit)
        E = sp.elem_words
        self.max_size = tree_size(sp, sp.cap)
        self.shuf = server.alloc("shuffled-array", self.max_size, E)
        self.cache = server.alloc("cache", 1 + sp.d * sp.cache_slots, E)
        if scratch is None:
            scratch = server.alloc("scratch", self.max_size + sp.cache_slots, E)
        self.scratch = scratch
        self.size = 0
        self.slots = 0
        self.bound = 0
        self.st = np.zeros(6, dtype=np.int64)
        self.cfg = np.array(
            [
                sp.d,
                sp.rebuild_period,
                E,
                sp.per_block,
                sp.b_prime,
                self.shuf.base,
                self.shuf.code,
                self.shuf.index,
                self.cache.base,
                self.cache.code,
                self.cache.index,
                int(server.record),
                sp.cap,
            ],
            dtype=np.int64,
        )
        self.seen = np.zeros(0, dtype=np.int64)
        self._one = None
        self.cfold = _cache_read_folds(sp, self.cache)
        self.rebuilds = 0
        self.windows = []
        self._window_start = None
        self.build(items, reserve)

    # public state

    @property
    def epoch_position(self):
        return int(self.st[0])

    @property
    def live_count(self):
        return int(self.st[2])

    @property
    def slot_violations(self):
        return int(self.st[5])

    @property
    def dummies_used(self):
        return self._dummies_used()

    def _dummies_used(self):
        # walk the list from its head to the cursor
        data = self.shuf.data
        n = 0
        cur = self._dummy_head
        while cur != self.st[1]:
            cur = int(data[cur, AUX])
            n += 1
        return n

    # build

    def build(self, items=(), reserve=None):
        """Rebuild the instance from scratch holding ``items``."""
        rows = _item_rows(items, self.sp)
        m = len(rows)
        if m > self.sp.cap:
            raise CapacityError(f"{m} items exceed capacity {self.sp.cap}")
        if len(set(rows[:, KEY].tolist())) != m:
            raise DuplicateKey("duplicate keys in build")
        self._close_window()
        slots = m if reserve is None else max(m, reserve)
        C = self.scratch.array(0, m)
        self.bulk.scan_write(C, rows)
        self.bulk.sort(C, lambda r: [r[:, KEY]])
        self._build_from(C, m, slots)

    def _build_from(self, C, m, slots):
        """Build the tree from ``C``: its first ``m`` rows are the live items
        sorted by key; ``slots`` (public) item positions are provisioned."""
        sp = self.sp
        slots = max(1, min(sp.cap, slots))
        if m > slots:
            raise CapacityError(f"{m} live items exceed the {slots} provisioned slots")
        E = sp.elem_words
        head_part = C.sub(0, min(slots, C.count))
        fast = current_route() == "fast"
        if fast:
            self.bulk.charge("r", head_part)
            live = head_part.view()[:m]
        else:
            live = self.bulk.scan_read(head_part)[:m]
        size = tree_size(sp, slots)
        perm = self.rng.permutation(size)
        logical, root, head = _layout(live, slots, size, perm, sp)
        self._item_pos = perm[:m].copy()
        arr = self.shuf.array(0, size)
        if fast:
            # write the logical order, then sort by the shuffled position
            arr.view()[perm] = logical
            self.bulk.charge("w", arr)
            self.bulk.charge("sort", arr)
        else:
            self.bulk.scan_write(arr, logical)
            self.bulk.sort(arr, lambda r: [r[:, IDENT]])
        self.server.write_block(self.cache.base, root)
        self.size = size
        self.slots = slots
        self.bound = slots
        self._dummy_head = head
        self.st[0] = 0
        self.st[1] = head
        self.st[2] = m
        self.st[4] += 1
        if len(self.seen) < size:
            self.seen = np.zeros(size, dtype=np.int64)
        self.rebuilds += 1
        self._bind()
        self._open_window()

    def _open_window(self):
        if self.server.record:
            self._window_start = self.server.io_count

    def _close_window(self):
        if self._window_start is not None:
            self.windows.append((self._window_start, self.server.io_count))
            self._window_start = None

    # collection of live items

    def collect(self):
        """Gather the live items into the scratch region.

        Returns (C, m): C holds the live items sorted by key in its first m
        rows (m is client-private), zero rows after.  The instance itself
        is left untouched.
        """
        # collection starts a rebuild, so it closes the current epoch
        self._close_window()
        if current_route() == "fast":
            return self._collect_fast()
        sp = self.sp
        span = sp.cache_slots
        j = self.epoch_position
        old = self.bulk.scan_read(self.shuf.array(0, self.size))
        ls = 1 + (sp.d - 1) * span
        recs = self.bulk.scan_read(self.cache.array(ls, span))
        total = self.size + span
        cand = np.zeros((total, sp.elem_words), dtype=np.int64)
        item = old[:, KIND] == K.ITEM
        cand[: self.size][item] = old[item]
        cand[: self.size, IDENT] = 0
        valid = np.zeros(span, dtype=bool)
        valid[: 2 * j] = True
        valid &= (recs[:, KIND] == K.ITEM) | (recs[:, KIND] == K.TOMB)
        tail = cand[self.size :]
        tail[valid] = recs[valid]
        # recency: F items 0, cache records by write position
        tail[:, IDENT] = np.where(valid, np.arange(1, span + 1), 0)
        C = self.scratch.array(0, total)
        self.bulk.scan_write(C, cand)
        self.bulk.sort(C, lambda r: [(r[:, KIND] == K.PAD).astype(np.int64), r[:, KEY], -r[:, IDENT]])
        self.bulk.scan_update(C, _dedupe_fast if current_route() == "fast" else _Dedupe())
        # after the filter the live keys are distinct and already in order
        pad = C.view()[:, KIND] == K.PAD
        order = np.concatenate([np.flatnonzero(~pad), np.flatnonzero(pad)])
        self.bulk.sort(C, lambda r: [(r[:, KIND] == K.PAD).astype(np.int64), r[:, KEY]], order=order)
        m = int(np.count_nonzero(C.view()[:, KIND] == K.ITEM))
        return C, m

    def _collect_fast(self):
        """Same result and trace as the sort-based collection, computed directly.

        The live set is the built items (stored in key order at known
        positions) overridden by the level-d cache records, latest first.
        """
        sp = self.sp
        bulk = self.bulk
        span = sp.cache_slots
        ls = 1 + (sp.d - 1) * span
        total = self.size + span
        C = self.scratch.array(0, total)
        bulk.charge("r", self.shuf.array(0, self.size))
        bulk.charge("r", self.cache.array(ls, span))
        bulk.charge("w", C)
        bulk.charge("sort", C)
        bulk.charge("rw", C)
        bulk.charge("sort", C)
        base = self.shuf.ensure(self.size)[self._item_pos]
        recs = self.cache.data[ls : ls + 2 * self.epoch_position]
        recs = recs[(recs[:, KIND] == K.ITEM) | (recs[:, KIND] == K.TOMB)]
        if len(recs):
            # keep the latest record per key
            rk = recs[::-1, KEY]
            _, first = np.unique(rk, return_index=True)
            latest = recs[::-1][first]
            keep = ~np.isin(base[:, KEY], latest[:, KEY], assume_unique=True)
            parts = [base[keep], latest[latest[:, KIND] == K.ITEM]]
            live = np.concatenate(parts)
            live = live[np.argsort(live[:, KEY], kind="stable")]
        else:
            live = base
        m = len(live)
        out = C.view()
        out[:] = 0
        out[:m] = live
        out[:m, IDENT] = 0
        return C, m

    def rebuild(self, reserve=None):
        self._close_window()
        bound = self.bound if reserve is None else reserve
        C, m = self.collect()
        self._build_from(C, m, bound)

    def rebuild_from(self, C, m, slots):
        """Replace the contents by the first m (key-sorted) rows of C."""
        self._close_window()
        self._build_from(C, m, slots)

    # accesses

    def run(self, keys, ops, vals=None, classes=None):
        """Run a batch of accesses; returns (status, values)."""
        sp = self.sp
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        n = len(keys)
        ops = np.ascontiguousarray(ops, dtype=np.int64)
        w = 2 * sp.b_prime
        if vals is None:
            vals = np.zeros((n, w), dtype=np.int64)
        if classes is None:
            classes = np.full(n, REAL, dtype=np.int64)
        if n and (keys.min() < 0 or keys.max() >= KEY_LIMIT):
            raise ValueError("keys must lie in [0, 2^62)")
        status = np.zeros(n, dtype=np.int64)
        outv = np.zeros((n, w), dtype=np.int64)
        per_access = 1 + sp.d * (sp.cache_reads + 1) + sp.d
        srv = self.server
        i = 0
        while i < n:
            if self.st[0] >= sp.rebuild_period:
                raise EpochExhausted("epoch budget used up")
            record = srv.record
            rows = per_access * min(n - i, sp.rebuild_period - int(self.st[0])) if record else 1
            ev = _evbuf(srv, rows)
            shuf = self.shuf.ensure(self.size)
            cache = self.cache.data
            i2, nev = K.small_access(
                shuf, cache, self.cache.ver, self.cfg, self.st, keys, ops, vals, classes,
                status, outv, i, n, ev, srv.counters, srv.digest, srv.clock, self.seen, self.cfold,
            )
            if record:
                srv.append_events(ev[:nev])
            self.bound = min(sp.cap, self.bound + (i2 - i))
            i = i2
            if self.auto_rebuild and self.st[0] >= sp.rebuild_period:
                self.rebuild()
        return status, outv

    def access1(self, key, op, vals=None, cls=REAL):
        """One access without per-call array setup; returns (status, value row)."""
        keys, ops, v, classes, status, outv, ev = self._one
        if self.st[0] >= self._period:
            raise EpochExhausted("epoch budget used up")
        if not 0 <= key < KEY_LIMIT:
            raise ValueError("keys must lie in [0, 2^62)")
        keys[0] = key
        ops[0] = op
        if vals is None:
            v[:] = 0
        else:
            v[0] = vals
        classes[0] = cls
        i2, nev = K.small_access(*self._args)
        if self._record:
            self.server.append_events(ev[:nev])
        if self.bound < self.sp.cap:
            self.bound += i2
        if self.auto_rebuild and self.st[0] >= self._period:
            self.rebuild()
        return int(status[0]), outv[0].copy()

    def _bind(self):
        """Cache the kernel arguments of access1 (storage moves only on rebuild)."""
        sp = self.sp
        srv = self.server
        if self._one is None:
            w = 2 * sp.b_prime
            self._one = (
                np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros((1, w), dtype=np.int64),
                np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64), np.zeros((1, w), dtype=np.int64),
                np.zeros((1 + sp.d * (sp.cache_reads + 2), 5), dtype=np.int64),
            )
        keys, ops, v, classes, status, outv, ev = self._one
        self._args = (
            self.shuf.ensure(self.size), self.cache.data, self.cache.ver, self.cfg, self.st, keys, ops, v, classes,
            status, outv, 0, 1, ev, srv.counters, srv.digest, srv.clock, self.seen, self.cfold,
        )
        self._record = srv.record
        self._period = sp.rebuild_period

    def get(self, key):
        status, outv = self.run([key], [K.OP_GET])
        return outv[0].copy() if status[0] == K.ST_OK else None

    def put(self, key, payload=(), kind=REAL):
        vals = np.zeros((1, 2 * self.sp.b_prime), dtype=np.int64)
        payload = np.asarray(payload, dtype=np.int64)
        if len(payload) > vals.shape[1]:
            raise ValueError("payload larger than 2*B' words")
        vals[0, : len(payload)] = payload
        status, _ = self.run([key], [K.OP_PUT], vals, np.array([kind], dtype=np.int64))
        if status[0] == K.ST_DUP:
            raise DuplicateKey(key)
        if status[0] == K.ST_FULL:
            raise CapacityError(f"instance holds {self.sp.cap} items")

    def noop(self):
        self.run([int(self.rng.integers(0, KEY_LIMIT))], [K.OP_NOOP])

    # client-side inspection for tests and debug checks (no server I/O)

    def live_items(self):
        """Map key -> (payload, class) of all live items, without I/O."""
        sp = self.sp
        out = {}
        data = self.shuf.ensure(self.size)[: self.size]
        for row in data[data[:, KIND] == K.ITEM]:
            out[int(row[KEY])] = (row[BODY:].copy(), int(row[AUX]))
        ls = 1 + (sp.d - 1) * sp.cache_slots
        recs = self.cache.data[ls : ls + 2 * self.epoch_position]
        for row in recs:
            if row[KIND] == K.ITEM:
                out[int(row[KEY])] = (row[BODY:].copy(), int(row[AUX]))
            elif row[KIND] == K.TOMB:
                out.pop(int(row[KEY]), None)
        return out


def _cache_read_folds(sp, cache):
    """Digest folds of the per-level wholesale cache reads (row 0 unused)."""
    span, pb, E = sp.cache_slots, sp.per_block, sp.elem_words
    out = np.zeros((sp.d + 1, 8), dtype=np.int64)
    offs = np.arange(0, span, pb, dtype=np.int64)
    lens = np.minimum(pb, span - offs) * E
    dirs = np.zeros(len(offs), dtype=np.int64)
    for lvl in range(1, sp.d + 1):
        rels = (1 + (lvl - 1) * span + offs) * E
        out[lvl] = K.sequence_fold(dirs, rels, lens, cache.code, cache.index)
    return out


def _item_rows(items, sp):
    w = 2 * sp.b_prime
    rows = np.zeros((len(items), sp.elem_words), dtype=np.int64)
    for x, it in enumerate(items):
        if not 0 <= it.key < KEY_LIMIT:
            raise ValueError("keys must lie in [0, 2^62)")
        payload = np.asarray(it.payload, dtype=np.int64)
        if len(payload) > w:
            raise ValueError("payload larger than 2*B' words")
        rows[x, KIND] = K.ITEM
        rows[x, KEY] = it.key
        rows[x, AUX] = it.kind
        rows[x, BODY : BODY + len(payload)] = payload
    return rows


def _dedupe_fast(rows, start):
    live = rows[:, KIND] != K.PAD
    keys = rows[:, KEY]
    first = np.ones(len(rows), dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    drop = live & (~first | (rows[:, KIND] == K.TOMB))
    rows[drop] = 0
    rows[:, IDENT] = 0


class _Dedupe:
    """Streaming form of the duplicate filter for the block-by-block route."""

    def __init__(self):
        self.last = None

    def __call__(self, rows, start):
        for x in range(len(rows)):
            if rows[x, KIND] == K.PAD:
                rows[x, IDENT] = 0
                continue
            k = int(rows[x, KEY])
            dup = k == self.last
            self.last = k
            if dup or rows[x, KIND] == K.TOMB:
                rows[x] = 0
            rows[x, IDENT] = 0


def _layout(live, slots, size, perm, sp):
    """Logical rows of the tree (items, inner levels, dummy list) with their
    shuffled positions in IDENT, plus the root row and dummy-list head."""
    d, bp, E = sp.d, sp.b_prime, sp.elem_words
    m = len(live)
    keys = np.zeros(slots, dtype=np.int64)
    keys[:m] = live[:, KEY]
    cnt, off, minkey = K.build_tree(keys, m, slots, d, bp)
    rows = np.zeros((size, E), dtype=np.int64)
    rows[:m] = live
    rows[:m, KIND] = K.ITEM
    pos = perm
    for lvl in range(d - 1, 0, -1):
        c, o, co = cnt[lvl], off[lvl], off[lvl + 1]
        nodes = rows[o : o + c]
        K.fill_nodes(nodes, c, cnt[lvl + 1], co, pos, minkey, bp)
    root = np.zeros((1, E), dtype=np.int64)
    K.fill_nodes(root, 1, cnt[1], off[1], pos, minkey, bp)
    dummies = np.arange(off[0], size)
    rows[dummies, KIND] = K.LDUMMY
    nxt = np.empty(len(dummies), dtype=np.int64)
    nxt[:-1] = pos[dummies[1:]]
    nxt[-1] = -1
    rows[dummies, AUX] = nxt
    rows[:, IDENT] = pos
    return rows, root.reshape(-1), int(pos[dummies[0]])


def standalone(B, M, cap, seed=0, record=True, items=()):
    """A single instance on its own server (for tests and demos)."""
    from .server import SimServer

    server = SimServer(B, record=record)
    sp = small_os_params(B, M, cap)
    return SmallOS(server, sp, np.random.default_rng(seed), items=items)
