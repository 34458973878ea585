"""Oblivious storage for isogrammic access sequences.

A static B'-ary tree H whose leaves cover n/B positions; every node holds a
small-set bucket (capacity 4L, 8L at the leaves).  An item lives in exactly
one bucket on the root-to-leaf path named by the leading bits of its nonce.
Both operations insert one item at the root and then search every bucket
on one random-looking path, so puts and gets look the same.  Items trickle
down through deterministic flushes: the root every L operations, level i
every B'^i * L operations, leaves are compacted every B'^h * L operations.

Everything the server sees is a function of the operation counter: all
buckets of a level are rebuilt together on a fixed clock (their epochs are
sized so that no bucket exceeds its access budget except with negligible
probability), and every provisioned size is a public bound derived from the
same clock.  Running past a budget triggers a restart, never a leak.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .oblivious import BulkIO, Overflow, is_real
from .params import derive_small_os_params
from .server import SimServer
from .smallos import CapacityError, EpochExhausted, SmallOS, tree_size

KIND, IDENT, KEY, AUX, BODY = K.KIND, K.IDENT, K.KEY, K.AUX, K.BODY


class RestartRequired(Exception):
    """A flush or compaction overflowed; the whole structure must be rebuilt."""


class ItemMissing(KeyError):
    """A get found no matching item (the caller broke the isogrammic contract)."""


class IsogrammicViolation(AssertionError):
    pass


@dataclass(frozen=True)
class IsoKey:
    nonce: int
    tag: int

    def pack(self, p):
        if not 0 <= self.nonce < 1 << p.nonce_bits:
            raise ValueError("nonce out of range")
        if not 0 <= self.tag < 1 << p.tag_bits:
            raise ValueError("tag out of range")
        return (self.nonce << p.tag_bits) | self.tag

    @classmethod
    def unpack(cls, packed, p):
        return cls(packed >> p.tag_bits, packed & ((1 << p.tag_bits) - 1))


@dataclass
class HNode:
    node_id: int
    depth: int
    index: int
    bucket: SmallOS
    flushes_received: int = 0


class IsoChecker:
    """Online check of the isogrammic conditions on a put/get stream.

    (a) every get names a live key, (b) no put names a live key, (c) keys
    carry an in-range nonce and are never reused across the run.
    """

    def __init__(self, nonce_bits, tag_bits):
        self.nonce_bits = nonce_bits
        self.tag_bits = tag_bits
        self.live = set()
        self.used = set()
        self.gotten = set()
        self.ops = 0
        self.violations = []
        self.nonce_top = np.zeros(16, dtype=np.int64)

    def _bad(self, cond, key):
        self.violations.append((self.ops, cond, key))

    def on_put(self, key):
        nonce = key >> self.tag_bits
        if key in self.live:
            self._bad("put-of-live-key", key)
        if key in self.used:
            self._bad("key-reused", key)
        if not 0 <= nonce < 1 << self.nonce_bits:
            self._bad("nonce-range", key)
        else:
            self.nonce_top[nonce >> max(0, self.nonce_bits - 4)] += 1
        self.live.add(key)
        self.used.add(key)
        self.ops += 1

    def on_get(self, key):
        if key not in self.live:
            self._bad("get-of-absent-key", key)
        if key in self.gotten:
            self._bad("key-gotten-twice", key)
        self.live.discard(key)
        self.gotten.add(key)
        self.ops += 1

    @property
    def ok(self):
        return not self.violations


class IsogrammicOS:
    """The bucket tree H; see the module docstring."""

    def __init__(self, params, rng, server=None, record=False, debug=False, auto_restart=True,
                 slot_cap=None, checker=None):
        p = params
        self.p = p
        self.rng = rng
        self.server = server if server is not None else SimServer(p.B, record=record)
        self.debug = debug
        self.auto_restart = auto_restart
        self.checker = checker
        self.bulk = BulkIO(self.server, p.per_block, p.unit)
        self.slot_cap = p.slot_cap if slot_cap is None else slot_cap
        self.sp_inner = derive_small_os_params(p, p.bucket_cap)
        self.sp_leaf = derive_small_os_params(p, p.leaf_cap)
        E = p.elem_words
        need = max(tree_size(sp, sp.cap) + sp.cache_slots for sp in (self.sp_inner, self.sp_leaf))
        need += p.b_prime * self.slot_cap
        self.scratch = self.server.alloc("scratch", max(need, 2 * p.bucket_cap), E)
        self.work_a = self.server.alloc("bucket", p.bucket_cap, E)
        self.work_w = self.server.alloc("bucket", p.bucket_cap + p.b_prime * self.slot_cap, E)
        self.levels = []
        nid = 0
        for depth in range(p.h_depth + 1):
            sp = self.sp_leaf if depth == p.h_depth else self.sp_inner
            row = []
            for index in range(p.b_prime**depth):
                bucket = SmallOS(self.server, sp, rng, bulk=self.bulk, scratch=self.scratch, auto_rebuild=False)
                row.append(HNode(nid, depth, index, bucket))
                nid += 1
            self.levels.append(row)
        self.op_count = 0
        self.total_ops = 0
        self.restarts = 0
        self.flushes = 0
        self.compressions = 0
        self.flush_loads = []
        self.leaf_visits = np.zeros(p.n_leaves, dtype=np.int64)
        self.epoch_len = [self._epoch_length(d) for d in range(p.h_depth + 1)]
        self.epoch_left = list(self.epoch_len)
        self.bounds = [0] * (p.h_depth + 1)
        self.epoch_rebuilds = 0
        self._dummy_ctr = 0
        self._probe_tag = (1 << p.tag_bits) - 1
        w = 2 * p.b_prime
        self._zero = np.zeros((1, w), dtype=np.int64)
        self._one_key = np.zeros(1, dtype=np.int64)

    def _level_sp(self, depth):
        return self.sp_leaf if depth == self.p.h_depth else self.sp_inner

    def _epoch_length(self, depth):
        """Operations per level-wide epoch (a power of two).

        The root sees two accesses per operation, so its epoch is exactly
        half its access budget.  A deeper bucket is visited by a uniformly
        random fraction B'^-depth of the operations; its epoch is sized for
        an expected half budget, so overrunning needs a doubling of a
        Binomial mean of about period/2.
        """
        period = self._level_sp(depth).rebuild_period
        t = period // 2 if depth == 0 else period * self.p.b_prime**depth // 2
        return 1 << (max(1, t).bit_length() - 1)

    def group_bound(self, parent_bound):
        """Public bound on the items one child receives from a flush."""
        if parent_bound == 0:
            return 0
        return min(self.slot_cap, leaf_slots_bound(parent_bound, self.p.b_prime))

    def _set_level(self, depth, bound):
        self.bounds[depth] = min(self._level_sp(depth).cap, bound)
        self.epoch_left[depth] = self.epoch_len[depth]

    @property
    def root(self):
        return self.levels[0][0]

    @property
    def nodes(self):
        return [node for row in self.levels for node in row]

    # routing

    def path(self, nonce):
        p = self.p
        out = []
        for depth in range(p.h_depth + 1):
            idx = nonce >> (p.nonce_bits - depth * p.route_bits) if depth else 0
            out.append(self.levels[depth][idx])
        return out

    def child_route(self, depth):
        p = self.p
        shift = p.nonce_bits - (depth + 1) * p.route_bits
        mask = p.b_prime - 1
        tb = p.tag_bits
        return lambda keys: ((keys >> tb) >> shift) & mask

    def leaf_route(self):
        p = self.p
        shift = p.nonce_bits - p.h_depth * p.route_bits
        tb = p.tag_bits
        return lambda keys: (keys >> tb) >> shift

    def random_nonce(self):
        return int(self.rng.integers(0, 1 << self.p.nonce_bits))

    def dummy_key(self):
        # original dummies use the upper half of the tag space
        p = self.p
        half = 1 << (p.tag_bits - 1)
        tag = half + self._dummy_ctr % (half - 1)
        self._dummy_ctr += 1
        return IsoKey(self.random_nonce(), tag).pack(p)

    # operations

    def _vals(self, value):
        vals = np.zeros((1, 2 * self.p.b_prime), dtype=np.int64)
        if value is not None:
            value = np.asarray(value, dtype=np.int64)
            if len(value) > vals.shape[1]:
                raise ValueError("payload larger than 2*B' words")
            vals[0, : len(value)] = value
        return vals

    def _one(self, bucket, key, op, vals=None, cls=K.REAL):
        try:
            return bucket.access1(key, op, vals, cls)
        except EpochExhausted:
            if not self.auto_restart:
                raise RestartRequired("a bucket ran past its epoch budget") from None
        self.restart()
        return bucket.access1(key, op, vals, cls)

    def iso_put(self, k, v):
        packed = k.pack(self.p)
        if self.checker is not None:
            self.checker.on_put(packed)
        status, _ = self._one(self.root.bucket, packed, K.OP_PUT, self._vals(v)[0], K.REAL)
        if status == K.ST_DUP and self.debug:
            raise IsogrammicViolation(f"put of live key {k}")
        probe = IsoKey(self.random_nonce(), self._probe_tag)
        pk = probe.pack(self.p)
        path = self.path(probe.nonce)
        for node in path:
            self._one(node.bucket, pk, K.OP_GET)
        self.leaf_visits[path[-1].index] += 1
        self._tick()

    def iso_get(self, k):
        packed = k.pack(self.p)
        if self.checker is not None:
            self.checker.on_get(packed)
        self._one(self.root.bucket, self.dummy_key(), K.OP_PUT, None, K.ORIG)
        found = None
        path = self.path(k.nonce)
        for node in path:
            status, val = self._one(node.bucket, packed, K.OP_GET)
            if status == K.ST_OK:
                found = val
        self.leaf_visits[path[-1].index] += 1
        self._tick()
        if found is None and self.debug:
            raise ItemMissing(k)
        return found

    # flush schedule

    def _tick(self):
        self.op_count += 1
        self.total_ops += 1
        self.bounds[0] = min(self.sp_inner.cap, self.bounds[0] + 1)
        try:
            self._scheduled()
        except RestartRequired:
            if not self.auto_restart:
                raise
            self.restart()

    def _scheduled(self):
        p = self.p
        c = self.op_count
        h = p.h_depth
        fresh = [False] * (h + 1)
        if c % p.L == 0:
            period = p.L
            for depth in range(h):
                if c % period:
                    break
                gb = self.group_bound(self.bounds[depth])
                child_bound = self.bounds[depth + 1] + gb
                for node in self.levels[depth]:
                    self.flush(node, child_bound)
                self._set_level(depth, 0)
                self._set_level(depth + 1, child_bound)
                fresh[depth] = fresh[depth + 1] = True
                period *= p.b_prime
            else:
                if c % period == 0:
                    for node in self.levels[h]:
                        self.compress_leaf(node)
                    self._set_level(h, p.bucket_cap)
                    fresh[h] = True
        for depth in range(h + 1):
            if fresh[depth]:
                continue
            self.epoch_left[depth] -= 1
            if self.epoch_left[depth] == 0:
                self.rebuild_level(depth)

    def rebuild_level(self, depth):
        """Start a new epoch in every bucket of one level."""
        bound = self.bounds[depth]
        for node in self.levels[depth]:
            try:
                node.bucket.rebuild(reserve=bound)
            except CapacityError as exc:
                raise RestartRequired(str(exc)) from None
        self.epoch_left[depth] = self.epoch_len[depth]
        self.epoch_rebuilds += 1

    def settle_leaves(self):
        """Resize every leaf to its post-compression bound.

        Bulk loading leaves the leaf level far below the size it holds from
        the first compression onward; benchmarks call this so that they
        measure that steady state.
        """
        h = self.p.h_depth
        self._set_level(h, self.p.bucket_cap)
        self.rebuild_level(h)

    def flush(self, u, child_bound):
        """Move u's real and original-dummy items into its children."""
        p = self.p
        bulk = self.bulk
        C, m = u.bucket.collect()
        self.flush_loads.append(m)
        A = self.work_a.array()
        k = min(A.count, C.count)
        rows = np.zeros((A.count, p.elem_words), dtype=np.int64)
        rows[:k] = bulk.scan_read(C.sub(0, k))
        rows[rows[:, KIND] != K.ITEM] = 0
        rows[rows[:, KIND] != K.ITEM, KIND] = K.NEWD
        bulk.scan_write(A, rows)
        bulk.shuffle(A, self.rng)
        try:
            groups = bulk.partition(A, self.work_w.array(), p.b_prime, self.slot_cap, self.child_route(u.depth),
                                    self.rng)
        except Overflow as exc:
            raise RestartRequired(str(exc)) from None
        u.bucket.build((), reserve=0)
        u.flushes_received = 0
        self.flushes += 1
        children = self.levels[u.depth + 1][u.index * p.b_prime : (u.index + 1) * p.b_prime]
        for child, group in zip(children, groups):
            self._deliver(child, group, child_bound)
            child.flushes_received += 1

    def _deliver(self, child, group, bound):
        """Merge one padded group into a child bucket by rebuilding it.

        The child's live items and the group are gathered in the scratch
        region and sorted (padding last); the child is rebuilt with the
        public slot bound.
        """
        bulk = self.bulk
        bucket = child.bucket
        C, m = bucket.collect()
        rows = bulk.scan_read(group).copy()
        item = rows[:, KIND] == K.ITEM
        rows[~item] = 0
        rows[:, IDENT] = 0
        tail = self.scratch.array(C.count, group.count)
        bulk.scan_write(tail, rows)
        D = self.scratch.array(0, C.count + group.count)
        bulk.sort(D, lambda r: [(r[:, KIND] != K.ITEM).astype(np.int64), r[:, KEY]])
        total = m + int(np.count_nonzero(item))
        if self.debug:
            keys = D.view()[:total, KEY]
            if len(np.unique(keys)) != total:
                raise IsogrammicViolation("flush delivered a key that is already live")
        if total > min(bound, bucket.sp.cap):
            raise RestartRequired(f"{total} items exceed the public bound {bound}")
        bucket.rebuild_from(D, total, bound)

    def compress_leaf(self, u):
        """Compact a leaf bucket to 4L elements, keeping every real item."""
        p = self.p
        bulk = self.bulk
        C, m = u.bucket.collect()
        keep = p.bucket_cap
        if C.count < keep:
            # C sits at the start of the scratch region; extend it with zero rows
            tail = self.scratch.array(C.count, keep - C.count)
            bulk.scan_write(tail, np.zeros((tail.count, p.elem_words), dtype=np.int64))
            C = self.scratch.array(0, keep)
        try:
            D = bulk.compact(C, keep, self.rng)
        except Overflow as exc:
            raise RestartRequired(str(exc)) from None
        bulk.sort(D, lambda r: [(~is_real(r)).astype(np.int64), r[:, KEY], r[:, IDENT]])
        real = int(np.count_nonzero(is_real(D.view())))
        u.bucket.rebuild_from(D, real, keep)
        u.flushes_received = 0
        self.compressions += 1

    def restart(self):
        """Rebuild every bucket, placing each live real item at its leaf."""
        p = self.p
        bulk = self.bulk
        srv = self.server
        parts = []
        for node in self.nodes:
            C, m = node.bucket.collect()
            parts.append(bulk.scan_read(C))
        rows = np.concatenate(parts) if parts else np.zeros((0, p.elem_words), dtype=np.int64)
        rows[~is_real(rows)] = 0
        E = p.elem_words
        nl = p.n_leaves
        keep = p.bucket_cap
        pool = srv.alloc("scratch", len(rows), E).array()
        bulk.scan_write(pool, rows)
        work = srv.alloc("scratch", len(rows) + nl * keep, E).array()
        try:
            groups = bulk.partition(pool, work, nl, keep, self.leaf_route(), self.rng)
        except Overflow as exc:
            raise RuntimeError(f"restart cannot place items: {exc}") from None
        for row in self.levels[:-1]:
            for node in row:
                node.bucket.build((), reserve=0)
                node.flushes_received = 0
        for node, group in zip(self.levels[-1], groups):
            bulk.sort(group, lambda r: [(~is_real(r)).astype(np.int64), r[:, KEY], r[:, IDENT]])
            real = int(np.count_nonzero(is_real(group.view())))
            node.bucket.rebuild_from(group, real, keep)
            node.flushes_received = 0
        pool.region.release()
        work.region.release()
        for depth in range(p.h_depth):
            self._set_level(depth, 0)
        self._set_level(p.h_depth, keep)
        self.op_count = 0
        self.restarts += 1

    def bulk_load(self, keys, vals, slots=None):
        """Place items straight into their leaf buckets (an empty structure only).

        The trace depends only on len(keys) and the public slot bound; if a
        leaf receives more than ``slots`` items the bound doubles and the
        load is redone.
        """
        p = self.p
        bulk = self.bulk
        srv = self.server
        keys = np.asarray(keys, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.int64).reshape(len(keys), -1)
        if self.checker is not None:
            for k in keys.tolist():
                self.checker.on_put(k)
        E = p.elem_words
        nl = p.n_leaves
        rows = np.zeros((len(keys), E), dtype=np.int64)
        rows[:, KIND] = K.ITEM
        rows[:, KEY] = keys
        rows[:, AUX] = K.REAL
        rows[:, BODY : BODY + vals.shape[1]] = vals
        s = min(p.bucket_cap, slots or leaf_slots_bound(len(keys), nl))
        while True:
            pool = srv.alloc("scratch", len(rows), E).array()
            bulk.scan_write(pool, rows)
            work = srv.alloc("scratch", len(rows) + nl * s, E).array()
            try:
                groups = bulk.partition(pool, work, nl, s, self.leaf_route(), self.rng)
                break
            except Overflow:
                if s >= p.bucket_cap:
                    raise RuntimeError("bulk load exceeds leaf capacity") from None
                pool.region.release()
                work.region.release()
                s = min(p.bucket_cap, 2 * s)
        for node, group in zip(self.levels[-1], groups):
            bulk.sort(group, lambda r: [(~is_real(r)).astype(np.int64), r[:, KEY], r[:, IDENT]])
            real = int(np.count_nonzero(is_real(group.view())))
            node.bucket.rebuild_from(group, real, s)
        pool.region.release()
        work.region.release()
        self._set_level(p.h_depth, s)
        return s

    # debug inspection (client-side, no I/O)

    def live_items(self):
        out = {}
        for node in self.nodes:
            for key, (payload, cls) in node.bucket.live_items().items():
                if cls == K.REAL:
                    out[key] = payload
        return out

    def check_path_invariant(self):
        """Every live item sits in exactly one bucket on its nonce path."""
        p = self.p
        seen = {}
        for node in self.nodes:
            for key, (_, cls) in node.bucket.live_items().items():
                if cls != K.REAL:
                    continue
                if key in seen:
                    raise AssertionError(f"key {key} in two buckets")
                nonce = key >> p.tag_bits
                if self.path(nonce)[node.depth] is not node:
                    raise AssertionError(f"key {key} off its path at depth {node.depth}")
                seen[key] = node.node_id
        return len(seen)

    @property
    def slot_violations(self):
        return sum(node.bucket.slot_violations for node in self.nodes)

    def bucket_loads(self):
        return [node.bucket.live_count for node in self.nodes]


def leaf_slots_bound(items, leaves):
    """Public per-leaf slot count for a bulk load of ``items`` uniform keys."""
    mu = items / leaves
    return int(np.ceil(mu + 8 * np.sqrt(mu) + 8))
