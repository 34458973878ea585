"""Structures that emit isogrammic streams: queue, stack, search tree, scans.

Each adapter keeps small client state and issues a fixed number of storage
operations per logical operation, so neither op types nor arguments show in
the trace.
"""

from dataclasses import dataclass

import numpy as np

from .isoos import IsoChecker, IsogrammicOS, IsoKey
from .params import derive_params

NULL = -1


class ScriptError(RuntimeError):
    """An adapter script broke its access discipline."""


def make_storage(cfg, record=False, debug=True, slot_cap=None):
    """An isogrammic store for ``cfg`` with an attached stream checker."""
    p = derive_params(cfg)
    rng = np.random.default_rng(cfg.seed)
    checker = IsoChecker(p.nonce_bits, p.tag_bits)
    return IsogrammicOS(p, rng, record=record, debug=debug, slot_cap=slot_cap, checker=checker)


# queue


@dataclass
class IsoQueueState:
    capacity: int
    front: int = 0
    rear: int = 0
    count: int = 0
    version_front: int = 0
    version_rear: int = 0
    dummy: int = 0
    version_b: int = 0
    front_nonce: int = 0
    rear_nonce: int = 0


class IsoQueue:
    """FIFO queue over a real array A and a decoy array B of ``capacity`` cells.

    Every operation is one storage operation: enqueue puts A[rear], dequeue
    gets A[front], and a no-op (or an enqueue/dequeue that would fail)
    touches the next cell of B, alternately putting and getting it.  Cell
    tags encode (array, index, version); versions count wrap-arounds.  Each
    A cell's payload carries the nonce of the following cell, so the client
    keeps only the front and rear nonces.
    """

    def __init__(self, store, capacity=None):
        self.store = store
        self.p = store.p
        cap = self.p.n if capacity is None else capacity
        first = store.random_nonce()
        self.state = IsoQueueState(cap, front_nonce=first, rear_nonce=first)
        self._b_key = None
        self.iso_ops = 0

    def _tag(self, array, index, version):
        tag = ((version * self.state.capacity + index) << 1) | array
        if tag >> self.p.tag_bits:
            raise OverflowError("queue tag space exhausted")
        return tag

    def _dummy(self):
        s = self.state
        if self._b_key is None:
            self._b_key = IsoKey(self.store.random_nonce(), self._tag(1, s.dummy, s.version_b))
            self.store.iso_put(self._b_key, None)
        else:
            self.store.iso_get(self._b_key)
            self._b_key = None
            s.dummy += 1
            if s.dummy == s.capacity:
                s.dummy = 0
                s.version_b += 1
        self.iso_ops += 1

    def enqueue(self, value):
        s = self.state
        if s.count == s.capacity:
            self._dummy()
            return False
        nxt = self.store.random_nonce()
        key = IsoKey(s.rear_nonce, self._tag(0, s.rear, s.version_rear))
        self.store.iso_put(key, [value, nxt])
        s.rear_nonce = nxt
        s.rear += 1
        if s.rear == s.capacity:
            s.rear = 0
            s.version_rear += 1
        s.count += 1
        self.iso_ops += 1
        return True

    def dequeue(self):
        s = self.state
        if s.count == 0:
            self._dummy()
            return None
        key = IsoKey(s.front_nonce, self._tag(0, s.front, s.version_front))
        val = self.store.iso_get(key)
        s.front_nonce = int(val[1])
        s.front += 1
        if s.front == s.capacity:
            s.front = 0
            s.version_front += 1
        s.count -= 1
        self.iso_ops += 1
        return int(val[0])

    def noop(self):
        self._dummy()

    def __len__(self):
        return self.state.count


# path-based structures


@dataclass
class NodeHandle:
    node_id: int
    key: IsoKey


class OdsSession:
    """Node store for linked structures with a fixed per-operation budget.

    Inside ``op()`` the structure fetches nodes by handle (a get, which
    removes the node) and stores nodes (a put under a fresh key, returning
    the new handle).  ``end`` pads the operation with decoy operations up
    to ``budget`` storage operations; exceeding the budget is an error.
    """

    def __init__(self, store, budget):
        self.store = store
        self.p = store.p
        self.budget = budget
        self._used = None
        self._puts = 0
        self._dummy_key = None
        self.iso_ops = 0
        self.ops = 0
        half = 1 << (self.p.tag_bits - 1)
        self._pad_base = half

    def begin(self):
        if self._used is not None:
            raise ScriptError("operation already open")
        self._used = 0

    def _count(self):
        if self._used is None:
            raise ScriptError("node access outside an operation")
        self._used += 1
        if self._used > self.budget:
            raise ScriptError(f"operation exceeds its budget of {self.budget}")
        self.iso_ops += 1

    def fetch(self, handle):
        self._count()
        val = self.store.iso_get(handle.key)
        if val is None:
            raise ScriptError(f"node {handle.node_id} not found")
        return val

    def store_node(self, payload, node_id=None):
        self._count()
        tag = self._puts
        self._puts += 1
        if tag >= self._pad_base:
            raise OverflowError("node tag space exhausted")
        key = IsoKey(self.store.random_nonce(), tag)
        self.store.iso_put(key, payload)
        return NodeHandle(tag if node_id is None else node_id, key)

    def _pad(self):
        self._count()
        if self._dummy_key is None:
            self._dummy_key = IsoKey(self.store.random_nonce(), self._pad_base + self.iso_ops % (self._pad_base - 1))
            self.store.iso_put(self._dummy_key, None)
        else:
            self.store.iso_get(self._dummy_key)
            self._dummy_key = None

    def end(self):
        while self._used < self.budget:
            self._pad()
        self._used = None
        self.ops += 1


def pack_handle(h, p):
    return NULL if h is None else h.key.pack(p)


def unpack_handle(word, p):
    word = int(word)
    if word == NULL:
        return None
    key = IsoKey.unpack(word, p)
    return NodeHandle(key.tag, key)


class IsoStack:
    """LIFO stack as a chain of nodes: one storage operation per call."""

    def __init__(self, store):
        self.ods = OdsSession(store, budget=1)
        self.p = store.p
        self.top = None
        self.size = 0

    def push(self, value):
        self.ods.begin()
        self.top = self.ods.store_node([value, pack_handle(self.top, self.p)])
        self.size += 1
        self.ods.end()

    def pop(self):
        self.ods.begin()
        out = None
        if self.top is not None:
            val = self.ods.fetch(self.top)
            out = int(val[0])
            self.top = unpack_handle(val[1], self.p)
            self.size -= 1
        self.ods.end()
        return out

    def noop(self):
        self.ods.begin()
        self.ods.end()


class _Node:
    __slots__ = ("key", "value", "left", "right", "lh", "rh")

    def __init__(self, key, value, left=None, right=None, lh=0, rh=0):
        self.key = key
        self.value = value
        self.left = left
        self.right = right
        self.lh = lh
        self.rh = rh

    @property
    def height(self):
        return 1 + max(self.lh, self.rh)


def _h(x):
    return x.height if isinstance(x, _Node) else 0


def _fix(x):
    if isinstance(x.left, _Node):
        x.lh = x.left.height
    if isinstance(x.right, _Node):
        x.rh = x.right.height
    return x


def _rot_right(z):
    y = z.left
    z.left = y.right
    z.lh = y.rh
    _fix(z)
    y.right = z
    y.rh = z.height
    return y


def _rot_left(z):
    y = z.right
    z.right = y.left
    z.rh = y.lh
    _fix(z)
    y.left = z
    y.lh = z.height
    return y


def _balance(z):
    _fix(z)
    if z.lh - z.rh > 1:
        if z.left.rh > z.left.lh:
            z.left = _rot_left(z.left)
            _fix(z)
        return _rot_right(z)
    if z.rh - z.lh > 1:
        if z.right.lh > z.right.rh:
            z.right = _rot_right(z.right)
            _fix(z)
        return _rot_left(z)
    return z


def avl_height_bound(n):
    """Largest height of an AVL tree with at most n nodes."""
    a, b, h = 1, 2, 1  # minimal node counts for heights h and h+1
    while b <= n:
        a, b = b, a + b + 1
        h += 1
    return h


class IsoAVL:
    """Balanced search tree (AVL) over int keys, with root-anchored path access.

    A node's payload is (key, value, left, right, left height, right
    height); child links are packed storage keys.  Search and insert fetch
    the whole root-to-node path, work on it in client memory (rotations
    only involve path nodes, since sibling heights are stored in parents),
    and store every fetched or new node back bottom-up under fresh keys.
    Every operation is padded to the same number of storage operations.
    """

    def __init__(self, store, capacity):
        if 2 * store.p.b_prime < 6:
            raise ValueError("tree nodes need 2*B' >= 6 payload words")
        self.p = store.p
        self.capacity = capacity
        self.max_height = avl_height_bound(capacity)
        self.ods = OdsSession(store, budget=2 * self.max_height + 1)
        self.root = None
        self.size = 0

    def _load(self, handle):
        v = self.ods.fetch(handle)
        return _Node(int(v[0]), int(v[1]), unpack_handle(v[2], self.p), unpack_handle(v[3], self.p),
                     int(v[4]), int(v[5]))

    def _walk(self, key):
        """Fetch the search path; returns the nodes and the final match (or None)."""
        path = []
        h = self.root
        while h is not None:
            node = self._load(h)
            path.append(node)
            if key == node.key:
                return path, node
            h = node.left if key < node.key else node.right
        return path, None

    def _store(self, x):
        if not isinstance(x, _Node):
            return x
        left = self._store(x.left)
        right = self._store(x.right)
        payload = [x.key, x.value, pack_handle(left, self.p), pack_handle(right, self.p), x.lh, x.rh]
        return self.ods.store_node(payload)

    def _rebuild(self, path, leaf, rebalance):
        # relink the fetched path bottom-up in client memory, then store it
        sub = leaf
        for node in reversed(path):
            if sub is not None:
                if sub.key < node.key:
                    node.left = sub
                else:
                    node.right = sub
            sub = _balance(node) if rebalance else _fix(node)
        return sub

    def search(self, key):
        self.ods.begin()
        path, hit = self._walk(key)
        top = self._rebuild(path, None, False) if path else None
        self.root = self._store(top)
        self.ods.end()
        return None if hit is None else hit.value

    def insert(self, key, value):
        if not 0 <= key < 1 << 62:
            raise ValueError("keys must lie in [0, 2^62)")
        self.ods.begin()
        path, hit = self._walk(key)
        if hit is not None:
            hit.value = value
            top = self._rebuild(path, None, False)
        else:
            if self.size >= self.capacity:
                self.ods.end()
                raise OverflowError("tree is full")
            top = self._rebuild(path, _Node(key, value), True)
            self.size += 1
        self.root = self._store(top)
        self.ods.end()
        return hit is None

    def noop(self):
        self.ods.begin()
        self.ods.end()


# compressed scanning


class ScanSet:
    """A set of items visited once per round in a fixed order.

    Item i of round r is stored under a key whose nonce was drawn when item
    i-1 was written back in round r-1 (and kept in that item's payload), so
    the client holds only the first key of the next round.
    """

    def __init__(self, store, values):
        self.store = store
        self.p = store.p
        self.m = len(values)
        self.width = 2 * self.p.b_prime - 1
        self.round = 0
        self.cursor = 0
        self.visited = np.zeros(self.m, dtype=bool)
        self.iso_ops = 0
        rows = [np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in values]
        self._nonce = store.random_nonce()
        for i, row in enumerate(rows):
            self._write(0, i, row)
        self._begin_round()

    def _tag(self, r, i):
        tag = r * self.m + i
        if tag >> self.p.tag_bits:
            raise OverflowError("scan tag space exhausted")
        return tag

    def _write(self, r, i, row):
        if len(row) > self.width:
            raise ValueError(f"item wider than {self.width} words")
        nxt = self.store.random_nonce()
        payload = np.zeros(self.width + 1, dtype=np.int64)
        payload[: len(row)] = row
        payload[-1] = nxt
        if i == 0:
            self._next_head = self._nonce
        self.store.iso_put(IsoKey(self._nonce, self._tag(r, i)), payload)
        self.iso_ops += 1
        self._nonce = nxt

    def _begin_round(self):
        self.cursor = 0
        self.visited[:] = False
        self._read_nonce = self._next_head
        self._nonce = self.store.random_nonce()

    def visit(self, i, compute=None):
        """Get item i, apply ``compute`` (returns the new row), write it back."""
        if i != self.cursor or self.visited[i]:
            raise ScriptError(f"item {i} visited out of order in round {self.round}")
        val = self.store.iso_get(IsoKey(self._read_nonce, self._tag(self.round, i)))
        self.iso_ops += 1
        if val is None:
            raise ScriptError(f"item {i} missing in round {self.round}")
        self._read_nonce = int(val[-1])
        row = val[:-1]
        new = row if compute is None else np.asarray(compute(row.copy()), dtype=np.int64)
        self._write(self.round + 1, i, new)
        self.visited[i] = True
        self.cursor += 1
        if self.cursor == self.m:
            self.round += 1
            self._begin_round()
        return row

    def scan_round(self, compute=None):
        start = self.round
        out = []
        for i in range(self.m):
            out.append(self.visit(i, compute))
        assert self.round == start + 1
        return out
