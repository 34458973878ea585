"""Oblivious RAM over n words on top of the isogrammic storage.

Memory is split into sub-blocks of B' words, the leaves of a static B'-ary
tree R.  Every node of R is stored as one item keyed by (nonce, tag); a
parent stores the packed keys of its children, and the client keeps only
the key of the root.  An access fetches the root-to-leaf path top-down with
gets, then writes it back bottom-up with puts under fresh keys, so the
stream of storage operations is isogrammic and identical for reads and
writes.
"""

from dataclasses import dataclass

import numpy as np

from .isoos import IsoChecker, IsogrammicOS, IsoKey
from .params import Config, derive_params


@dataclass
class RootHandle:
    node_id: int
    key: IsoKey


class BiosORAM:
    """read(i) / write(i, v) over ``n`` 64-bit words.

    ``init`` is ``"puts"`` (one storage put per node of R, leaves first) or
    ``"bulk"`` (nodes placed directly into the leaf buckets).
    """

    def __init__(self, cfg, memory=None, record=False, debug=False, check=True, init="puts", slot_cap=None,
                 rng=None):
        if isinstance(cfg, Config):
            self.cfg = cfg
            self.p = derive_params(cfg)
        else:
            self.p = cfg
            self.cfg = Config(cfg.n, cfg.B, cfg.M)
        p = self.p
        self.rng = rng if rng is not None else np.random.default_rng(self.cfg.seed)
        self.checker = IsoChecker(p.nonce_bits, p.tag_bits) if check else None
        self.os = IsogrammicOS(p, self.rng, record=record, debug=debug, slot_cap=slot_cap, checker=self.checker)
        self.server = self.os.server
        bp = p.b_prime
        self.r = p.r_depth
        n_leaves = -(-p.n // bp)
        self.counts = [-(-n_leaves // bp ** (self.r - j)) for j in range(self.r + 1)]
        self.offsets = np.cumsum([0] + self.counts).tolist()
        self.n_nodes = self.offsets[-1]
        self.clock = 0
        self.accesses = 0
        self.init_puts = 0
        mem = np.zeros(n_leaves * bp, dtype=np.int64)
        if memory is not None:
            memory = np.asarray(memory, dtype=np.int64)
            if len(memory) != p.n:
                raise ValueError(f"memory must have {p.n} words")
            mem[: p.n] = memory
        if init == "puts":
            self._init_puts(mem)
        elif init == "bulk":
            self._init_bulk(mem)
        else:
            raise ValueError(f"unknown init mode {init!r}")

    @property
    def n(self):
        return self.p.n

    @property
    def iso_ops_per_access(self):
        return 2 * (self.r + 1)

    def _new_key(self, u):
        tag = self.clock * self.n_nodes + u
        if tag >> self.p.tag_bits:
            raise OverflowError("tag space exhausted")
        return IsoKey(self.os.random_nonce(), tag)

    def _level_payloads(self, mem):
        """Yield (level, node ids, payload rows) bottom-up, drawing keys as we go."""
        p = self.p
        bp = p.b_prime
        w = 2 * bp
        leaves = self.counts[-1]
        vals = np.zeros((leaves, w), dtype=np.int64)
        vals[:, :bp] = mem.reshape(leaves, bp)
        for j in range(self.r, -1, -1):
            ids = np.arange(self.offsets[j], self.offsets[j + 1])
            keys = np.array([self._new_key(int(u)).pack(p) for u in ids], dtype=np.int64)
            yield j, ids, keys, vals
            if j:
                cnt = self.counts[j - 1]
                nxt = np.zeros((cnt, w), dtype=np.int64)
                padded = np.zeros(cnt * bp, dtype=np.int64)
                padded[: len(keys)] = keys
                nxt[:, :bp] = padded.reshape(cnt, bp)
                vals = nxt

    def _init_puts(self, mem):
        for j, ids, keys, vals in self._level_payloads(mem):
            for k, v in zip(keys.tolist(), vals):
                self.os.iso_put(IsoKey.unpack(k, self.p), v)
                self.init_puts += 1
        self.root = RootHandle(0, IsoKey.unpack(int(keys[0]), self.p))

    def _init_bulk(self, mem):
        all_keys, all_vals = [], []
        for j, ids, keys, vals in self._level_payloads(mem):
            all_keys.append(keys)
            all_vals.append(vals)
        self.os.bulk_load(np.concatenate(all_keys), np.concatenate(all_vals))
        self.root = RootHandle(0, IsoKey.unpack(int(all_keys[-1][0]), self.p))

    def _path(self, leaf):
        """(node id, child digit) for each level of the path to ``leaf``."""
        rb = self.p.route_bits
        mask = self.p.b_prime - 1
        out = []
        for j in range(self.r + 1):
            digit = (leaf >> ((self.r - 1 - j) * rb)) & mask if j < self.r else 0
            out.append((self.offsets[j] + (leaf >> ((self.r - j) * rb)), digit))
        return out

    def access(self, i, value=None):
        """Return the old word at ``i``; store ``value`` if given."""
        p = self.p
        if not 0 <= i < p.n:
            raise IndexError(f"cell {i} outside [0, {p.n})")
        bp = p.b_prime
        leaf, off = divmod(i, bp)
        path = self._path(leaf)
        key = self.root.key
        fetched = []
        for j, (u, digit) in enumerate(path):
            val = self.os.iso_get(key)
            if val is None:
                val = np.zeros(2 * bp, dtype=np.int64)
            fetched.append(val)
            if j < self.r:
                key = IsoKey.unpack(int(val[digit]), p)
        old = int(fetched[-1][off])
        if value is not None:
            fetched[-1][off] = value
        self.clock += 1
        child = None
        for j in range(self.r, -1, -1):
            u, digit = path[j]
            val = fetched[j]
            if child is not None:
                val[digit] = child.pack(p)
            child = self._new_key(u)
            self.os.iso_put(child, val)
        self.root = RootHandle(0, child)
        self.accesses += 1
        return old

    def read(self, i):
        return self.access(i)

    def write(self, i, v):
        self.access(i, int(v))

    @property
    def restarts(self):
        return self.os.restarts


OramSession = BiosORAM
