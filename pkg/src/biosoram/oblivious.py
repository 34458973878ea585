"""Data-oblivious bulk primitives over server-resident arrays.

Sorting is a bitonic network over blocks of ``unit`` elements where every
comparator is a merge-split: read both blocks, merge privately, write the
low half back to the lower block.  The schedule depends only on
(count, elem_words, B, M).

Two routes produce the same result and the same trace:

* ``network`` executes the schedule block by block through the server API;
* ``fast`` computes the final order with numpy and folds the precomputed
  schedule into the trace in one step.

The route only changes wall time; tests compare the two.
"""

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from . import _kernels as K
from .server import Schedule

KIND, IDENT, KEY, AUX, BODY = K.KIND, K.IDENT, K.KEY, K.AUX, K.BODY

ROUTES = ("fast", "network")
_route = ["fast"]


class Overflow(Exception):
    """A bounded-capacity bulk step received more real items than allowed."""


def current_route():
    return _route[0]


@contextmanager
def use_route(name):
    if name not in ROUTES:
        raise ValueError(f"unknown route {name!r}")
    old = _route[0]
    _route[0] = name
    try:
        yield
    finally:
        _route[0] = old


class _LRU:
    def __init__(self, size):
        self.size = size
        self.items = OrderedDict()

    def get(self, key, make):
        hit = self.items.get(key)
        if hit is not None:
            self.items.move_to_end(key)
            return hit
        value = make()
        self.items[key] = value
        if len(self.items) > self.size:
            self.items.popitem(last=False)
        return value


_schedules = _LRU(4096)
_pairs = _LRU(64)


def _block_bounds(count, per):
    starts = np.arange(0, count, per, dtype=np.int64)
    ends = np.minimum(starts + per, count)
    return starts, ends


def scan_schedule(mode, count, elem_words, per):
    """Sequential pass: 'r' reads, 'w' writes, 'rw' read then write per block."""

    def make():
        starts, ends = _block_bounds(count, per)
        dirs_one = {"r": [0], "w": [1], "rw": [0, 1]}[mode]
        k = len(dirs_one)
        dirs = np.tile(np.array(dirs_one, dtype=np.int64), len(starts))
        offs = np.repeat(starts * elem_words, k)
        lens = np.repeat((ends - starts) * elem_words, k)
        return dirs, offs, lens

    return _schedules.get(("scan", mode, count, elem_words, per), lambda: Schedule(make, elem_words, count))


def network_pairs(nblocks):
    return _pairs.get(nblocks, lambda: K.network_pairs(nblocks))


def network_schedule(count, elem_words, unit):
    def make():
        nb = -(-count // unit)
        lo, hi = network_pairs(nb)
        return K.network_events(count, unit, elem_words, lo, hi)

    return _schedules.get(("net", count, elem_words, unit), lambda: Schedule(make, elem_words, count))


def _order(cols, n):
    """Lexicographic order for a list of key columns, most significant first."""
    if not cols:
        return np.arange(n)
    if len(cols) == 1:
        return np.argsort(cols[0], kind="stable")
    return np.lexsort(tuple(reversed(cols)))


class BulkIO:
    """Bulk primitives bound to one server and message geometry.

    ``per_block`` elements per sequential-scan message and ``unit``
    elements per network block (two units must fit in client memory).
    """

    def __init__(self, server, per_block, unit):
        self.server = server
        self.per_block = per_block
        self.unit = unit

    # sequential scans

    def scan_read(self, arr):
        if arr.count == 0:
            return np.zeros((0, arr.elem_words), dtype=np.int64)
        if current_route() == "fast":
            rows = arr.view().copy()
            self.server.apply_schedule(scan_schedule("r", arr.count, arr.elem_words, self.per_block), arr)
            return rows
        out = []
        for a, b in zip(*_block_bounds(arr.count, self.per_block)):
            blk = self.server.read_block(arr.addr(int(a)), int(b - a) * arr.elem_words)
            out.append(blk.words.reshape(-1, arr.elem_words))
        return np.concatenate(out)

    def scan_write(self, arr, rows):
        rows = np.asarray(rows, dtype=np.int64).reshape(arr.count, arr.elem_words)
        if arr.count == 0:
            return
        if current_route() == "fast":
            arr.view()[:] = rows
            self.server.apply_schedule(scan_schedule("w", arr.count, arr.elem_words, self.per_block), arr)
            return
        for a, b in zip(*_block_bounds(arr.count, self.per_block)):
            self.server.write_block(arr.addr(int(a)), rows[a:b].reshape(-1))

    def scan_update(self, arr, fn):
        """Read-modify-write pass; ``fn(rows, start)`` edits each block in place.

        ``fn`` must be a streaming function of the rows seen so far; the
        fast route calls it once with the whole array.
        """
        if arr.count == 0:
            return
        if current_route() == "fast":
            rows = arr.view()
            fn(rows, 0)
            self.server.apply_schedule(scan_schedule("rw", arr.count, arr.elem_words, self.per_block), arr)
            return
        for a, b in zip(*_block_bounds(arr.count, self.per_block)):
            addr = arr.addr(int(a))
            blk = self.server.read_block(addr, int(b - a) * arr.elem_words)
            rows = blk.words.reshape(-1, arr.elem_words)
            fn(rows, int(a))
            self.server.write_block(addr, rows.reshape(-1))

    def charge(self, kind, arr):
        """Fold the trace of one bulk step without moving data (fast route only).

        ``kind`` is 'r', 'w', 'rw' (scans) or 'sort'.  Callers use this when
        they can compute the step's final contents directly.
        """
        if arr.count == 0:
            return
        if kind == "sort":
            sched = network_schedule(arr.count, arr.elem_words, self.unit)
        else:
            sched = scan_schedule(kind, arr.count, arr.elem_words, self.per_block)
        self.server.apply_schedule(sched, arr)

    # sorting network

    def sort(self, arr, key_of, tags=None, order=None):
        """Sort ``arr`` by ``key_of(rows)`` (list of int columns).

        With ``tags`` (a permutation of range(count)) the tags are written
        into the IDENT column during the first pass and break ties; without
        tags the key must order all distinguishable rows totally.  A caller
        that already knows the sorted ``order`` may pass it to skip the
        numpy sort on the fast route.
        """
        n = arr.count
        if n == 0:
            return

        def cols(rows):
            c = list(key_of(rows))
            if tags is not None:
                c.append(rows[:, IDENT])
            return c

        if current_route() == "fast":
            rows = arr.view()
            if tags is not None:
                rows[:, IDENT] = tags
            if order is None:
                order = _order(cols(rows), n)
            rows[:] = rows[order]
            self.server.apply_schedule(network_schedule(n, arr.elem_words, self.unit), arr)
            return
        self._network(arr, cols, tags)

    def _network(self, arr, cols, tags):
        srv, E, u = self.server, arr.elem_words, self.unit
        n = arr.count
        nb = -(-n // u)

        def span(b):
            a = b * u
            return arr.addr(a), (min(n, a + u) - a) * E

        for b in range(nb):
            addr, ln = span(b)
            rows = srv.read_block(addr, ln).words.reshape(-1, E)
            if tags is not None:
                rows[:, IDENT] = tags[b * u : b * u + len(rows)]
            rows = rows[_order(cols(rows), len(rows))]
            srv.write_block(addr, rows.reshape(-1))
        lo, hi = network_pairs(nb)
        for i, l in zip(lo.tolist(), hi.tolist()):
            ai, li = span(i)
            al, ll = span(l)
            both = np.concatenate(
                [srv.read_block(ai, li).words.reshape(-1, E), srv.read_block(al, ll).words.reshape(-1, E)]
            )
            both = both[_order(cols(both), len(both))]
            k = li // E
            srv.write_block(ai, both[:k].reshape(-1))
            srv.write_block(al, both[k:].reshape(-1))

    # public primitives

    def shuffle(self, arr, rng):
        """Uniformly random permutation of ``arr`` (tags from ``rng``)."""
        self.sort(arr, lambda rows: [], tags=rng.permutation(arr.count))

    def oblivious_sort(self, arr, key_of, rng):
        self.sort(arr, key_of, tags=rng.permutation(arr.count))

    def compact(self, arr, keep_cap, rng):
        """Keep ``keep_cap`` elements: real items, then original dummies, then filler."""
        if keep_cap > arr.count:
            raise ValueError("keep_cap exceeds array size")
        self.sort(arr, class_rank, tags=rng.permutation(arr.count))
        # the tag pass saw every element, so the client knows the real count
        real = int(np.count_nonzero(is_real(arr.view())))
        if real > keep_cap:
            raise Overflow(f"{real} real items exceed compaction capacity {keep_cap}")
        return arr.sub(0, keep_cap)

    def partition(self, arr, work, fanout, slot_cap, route_of, rng):
        """Route items of ``arr`` into ``fanout`` padded groups of ``slot_cap``.

        ``route_of(keys)`` maps item keys to child indices.  Uses ``work``
        (at least arr.count + fanout*slot_cap elements) and returns the
        groups as consecutive sub-arrays of it.
        """
        total = arr.count + fanout * slot_cap
        if work.count < total:
            raise ValueError("work array too small")
        w = work.sub(0, total)
        src = self.scan_read(arr)
        rows = np.zeros((total, arr.elem_words), dtype=np.int64)
        rows[: arr.count] = src
        fill = rows[arr.count :]
        fill[:, KIND] = K.NEWD
        fill[:, AUX] = 1
        fill[:, KEY] = np.repeat(np.arange(fanout, dtype=np.int64), slot_cap)
        # input padding is neither routed nor kept
        pad = rows[: arr.count, KIND] != K.ITEM
        rows[: arr.count][pad] = 0
        self.scan_write(w, rows)

        def group_key(r):
            item = r[:, KIND] == K.ITEM
            designated = (r[:, KIND] == K.NEWD) & (r[:, AUX] == 1)
            group = np.full(len(r), fanout, dtype=np.int64)
            group[item] = route_of(r[item, KEY])
            group[designated] = r[designated, KEY]
            return [group, (~item).astype(np.int64)]

        self.sort(w, group_key, tags=rng.permutation(total))
        state = {"group": -1, "rank": 0, "overflow": None}

        def mark(r, start):
            g = group_key(r)[0]
            for x in range(len(r)):
                gx = int(g[x])
                if gx != state["group"]:
                    state["group"], state["rank"] = gx, 0
                if gx == fanout:
                    continue
                if state["rank"] >= slot_cap:
                    if r[x, KIND] == K.ITEM:
                        state["overflow"] = gx
                    r[x] = 0
                state["rank"] += 1

        def mark_fast(r, start):
            g = group_key(r)[0]
            first = np.r_[0, np.flatnonzero(np.diff(g)) + 1]
            rank = np.arange(len(g)) - np.repeat(first, np.diff(np.r_[first, len(g)]))
            extra = (g < fanout) & (rank >= slot_cap)
            if np.any(extra & (r[:, KIND] == K.ITEM)):
                state["overflow"] = int(g[extra & (r[:, KIND] == K.ITEM)][0])
            r[extra] = 0

        self.scan_update(w, mark_fast if current_route() == "fast" else mark)
        if state["overflow"] is not None:
            raise Overflow(f"child {state['overflow']} received more than {slot_cap} items")
        # dropped rows are all-zero and sort to the end; the earlier tags
        # keep the order inside each group fixed
        self.sort(w, lambda r: group_key(r) + [r[:, IDENT]])
        return [w.sub(c * slot_cap, slot_cap) for c in range(fanout)]


def is_real(rows):
    return (rows[:, KIND] == K.ITEM) & (rows[:, AUX] == K.REAL)


def class_rank(rows):
    rank = np.full(len(rows), 2, dtype=np.int64)
    item = rows[:, KIND] == K.ITEM
    rank[item & (rows[:, AUX] == K.REAL)] = 0
    rank[item & (rows[:, AUX] == K.ORIG)] = 1
    return [rank]


# spec-level entry points


def oblivious_shuffle(bulk, a, rng):
    bulk.shuffle(a, rng)


def oblivious_sort(bulk, a, key_of, rng):
    bulk.oblivious_sort(a, key_of, rng)


def sort_pad_partition(bulk, a, work, fanout, slot_cap, route_of, rng):
    return bulk.partition(a, work, fanout, slot_cap, route_of, rng)


def oblivious_compact(bulk, a, keep_cap, rng):
    return bulk.compact(a, keep_cap, rng)
