"""Simulated honest-but-curious block server and its access trace.

Every block I/O is logged as an :class:`AccessEvent`.  Besides optional full
event storage, the log always keeps counters and two rolling polynomial
digests (mod 2^31-1, two lanes each):

* the *shape* digest over (dir, len, region label), the view used for
  trace-shape equality, and
* the *full* digest which also folds in the region and the offset inside it.

Digests of fixed I/O schedules (:class:`Schedule`) are precomputed once and
folded in O(1), so long bulk operations do not need per-event work.
"""

import bisect
import io
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

LABELS = ("shuffled-array", "cache", "dummy-list", "bucket", "scratch")
LABEL_CODE = {name: i for i, name in enumerate(LABELS)}
READ, WRITE = 0, 1
DIRS = ("read", "write")

# counter slots
C_IO, C_READS, C_WRITES, C_LABEL = 0, 1, 2, 3


@dataclass(frozen=True)
class MessageBlock:
    words: np.ndarray
    version: int = 0

    def __len__(self):
        return len(self.words)


@dataclass(frozen=True)
class AccessEvent:
    seq: int
    dir: str
    addr: int
    len: int
    region: str
    version: int

    @property
    def shape(self):
        return (self.dir, self.len, self.region)


@dataclass(frozen=True)
class Trace:
    events: tuple
    io_count: int

    def shapes(self):
        return [e.shape for e in self.events]


@dataclass(frozen=True)
class TraceSummary:
    io_count: int
    reads: int
    writes: int
    shape_digest: str
    full_digest: str
    by_label: dict


class Region:
    """A contiguous run of fixed-size elements at a static word offset.

    Storage is allocated on first touch, so address space can be reserved
    for scratch areas that the fast bulk route never materializes.
    """

    def __init__(self, index, label, base, count, elem_words):
        self.index = index
        self.label = label
        self.code = LABEL_CODE[label]
        self.base = base
        self.count = count
        self.elem_words = elem_words
        self._data = np.zeros((0, elem_words), dtype=np.int64)
        self._ver = np.zeros(0, dtype=np.int64)

    @property
    def words(self):
        return self.count * self.elem_words

    def ensure(self, rows):
        """Make sure storage exists for the first ``rows`` elements."""
        have = len(self._data)
        if rows > have:
            rows = min(self.count, max(rows, min(self.count, 2 * have)))
            data = np.zeros((rows, self.elem_words), dtype=np.int64)
            ver = np.zeros(rows, dtype=np.int64)
            data[:have] = self._data
            ver[:have] = self._ver
            self._data, self._ver = data, ver
        return self._data

    def release(self):
        """Drop stored contents (they are never read back)."""
        self._data = np.zeros((0, self.elem_words), dtype=np.int64)
        self._ver = np.zeros(0, dtype=np.int64)

    @property
    def data(self):
        return self.ensure(self.count)

    @property
    def ver(self):
        self.ensure(self.count)
        return self._ver

    def array(self, start=0, count=None):
        if count is None:
            count = self.count - start
        return ServerArray(self, start, count)

    def __repr__(self):
        return f"Region({self.label}#{self.index} base={self.base} count={self.count})"


@dataclass(frozen=True)
class ServerArray:
    region: Region
    start: int
    count: int

    def __post_init__(self):
        if self.start < 0 or self.count < 0 or self.start + self.count > self.region.count:
            raise ValueError("array exceeds its region")

    @property
    def elem_words(self):
        return self.region.elem_words

    @property
    def base(self):
        return self.region.base + self.start * self.region.elem_words

    def view(self):
        """Mutable numpy view of the stored elements (client-side shortcut)."""
        end = self.start + self.count
        return self.region.ensure(end)[self.start : end]

    def versions(self):
        end = self.start + self.count
        self.region.ensure(end)
        return self.region._ver[self.start : end]

    def sub(self, start, count):
        return ServerArray(self.region, self.start + start, count)

    def addr(self, i):
        return self.base + i * self.elem_words


class Schedule:
    """A fixed I/O schedule over one array: events (dir, word offset, len).

    Offsets are relative to the array base.  ``factory`` returns the event
    arrays; only the O(1) fold data and per-element last-write ordinals are
    kept unless the schedule is small, so large schedules can be cached.
    """

    KEEP_EVENTS = 1 << 12

    def __init__(self, factory, elem_words, count):
        dirs, offs, lens = factory()
        self._factory = factory
        self.elem_words = elem_words
        self.count = count
        self.n_events = len(dirs)
        self.n_writes = int(dirs.sum())
        self.n_reads = self.n_events - self.n_writes
        self.fold = K.schedule_fold(dirs, offs, lens)
        self.last_write = K.last_write(dirs, offs, lens, elem_words, count).astype(np.int32)
        self.writes_all = bool(np.all(self.last_write >= 0))
        self._events = (dirs, offs, lens) if self.n_events <= self.KEEP_EVENTS else None

    def events(self):
        return self._events if self._events is not None else self._factory()

    def __len__(self):
        return self.n_events


class SimServer:
    """Flat word-addressable store, accessed in messages of at most B words."""

    def __init__(self, B, record=True):
        self.B = B
        self.record = record
        self.regions = []
        self._bases = []
        self._next = 0
        self.clock = np.zeros(1, dtype=np.int64)
        self.counters = np.zeros(C_LABEL + len(LABELS), dtype=np.int64)
        self.digest = np.zeros(4, dtype=np.int64)
        self._chunks = []
        self._pending = []
        self._drained = 0
        self.observers = []

    # allocation

    def alloc(self, label, count, elem_words):
        if label not in LABEL_CODE:
            raise ValueError(f"unknown region label {label!r}")
        if count < 0 or elem_words < 1 or elem_words > self.B:
            raise ValueError("bad region geometry")
        region = Region(len(self.regions), label, self._next, count, elem_words)
        self.regions.append(region)
        self._bases.append(self._next)
        self._next += max(count, 1) * elem_words
        return region

    def region_at(self, addr):
        i = bisect.bisect_right(self._bases, addr) - 1
        if i < 0:
            raise IndexError(f"address {addr} outside allocated space")
        region = self.regions[i]
        if addr >= region.base + region.words:
            raise IndexError(f"address {addr} outside allocated space")
        return region

    def _locate(self, addr, length):
        if length <= 0:
            raise ValueError("zero-length transfer")
        if length > self.B:
            raise ValueError(f"len={length} > B={self.B}")
        region = self.region_at(addr)
        rel = addr - region.base
        if rel + length > region.words:
            raise IndexError(f"[{addr}, {addr + length}) crosses region end")
        E = region.elem_words
        if rel % E or length % E:
            raise ValueError("transfers must be element aligned")
        return region, rel // E, length // E

    # block I/O

    def read_block(self, addr, length):
        region, i, k = self._locate(addr, length)
        data = region.ensure(i + k)
        words = data[i : i + k].reshape(-1).copy()
        version = int(region._ver[i : i + k].max())
        self._log(READ, region, addr, length, 0)
        return MessageBlock(words, version)

    def write_block(self, addr, block):
        words = np.asarray(block.words if isinstance(block, MessageBlock) else block, dtype=np.int64)
        region, i, k = self._locate(addr, len(words))
        self.clock[0] += 1
        version = int(self.clock[0])
        region.ensure(i + k)[i : i + k] = words.reshape(k, region.elem_words)
        region._ver[i : i + k] = version
        self._log(WRITE, region, addr, len(words), version)
        return version

    def _log(self, d, region, addr, length, version):
        K.fold_event(self.digest, d, addr - region.base, length, region.code, region.index)
        c = self.counters
        c[C_IO] += 1
        c[C_READS + d] += 1
        c[C_LABEL + region.code] += 1
        if self.record:
            self._pending.append((d, addr, length, region.code, version))
        for obs in self.observers:
            obs(d, region, addr, length)

    # bulk paths used by the numpy route and compiled kernels

    def apply_schedule(self, sched, arr):
        """Fold a precomputed schedule executed on ``arr`` into the trace.

        Element versions are updated as if every write had happened.
        """
        if sched.elem_words != arr.elem_words or sched.count != arr.count:
            raise ValueError("schedule/array shape mismatch")
        if sched.n_events == 0:
            return
        region = arr.region
        rel_base = arr.start * arr.elem_words
        K.fold_schedule(self.digest, sched.fold, region.code, region.index, rel_base)
        v0 = int(self.clock[0])
        self.clock[0] += sched.n_writes
        lw = sched.last_write
        if sched.writes_all:
            arr.versions()[:] = lw
            arr.versions()[:] += v0 + 1
        elif sched.n_writes:
            touched = lw >= 0
            ver = arr.versions()
            ver[touched] = v0 + 1 + lw[touched]
        c = self.counters
        c[C_IO] += sched.n_events
        c[C_READS] += sched.n_reads
        c[C_WRITES] += sched.n_writes
        c[C_LABEL + region.code] += sched.n_events
        if self.record or self.observers:
            dirs, offs, lens = sched.events()
        if self.record:
            self._flush_pending()
            ev = np.empty((sched.n_events, 5), dtype=np.int64)
            ev[:, 0] = dirs
            ev[:, 1] = arr.base + offs
            ev[:, 2] = lens
            ev[:, 3] = region.code
            ev[:, 4] = np.where(dirs == WRITE, v0 + np.cumsum(dirs), 0)
            self._chunks.append(ev)
        for obs in self.observers:
            for d, off, ln in zip(dirs.tolist(), offs.tolist(), lens.tolist()):
                obs(d, region, arr.base + off, ln)

    def append_events(self, ev):
        """Store events produced (and already counted) by a kernel."""
        if self.record and len(ev):
            self._flush_pending()
            self._chunks.append(ev.copy())

    def _flush_pending(self):
        if self._pending:
            self._chunks.append(np.array(self._pending, dtype=np.int64).reshape(-1, 5))
            self._pending = []

    # trace access

    @property
    def io_count(self):
        return int(self.counters[C_IO])

    def event_array(self):
        """All recorded events as an (k, 5) array: dir, addr, len, label, version."""
        if not self.record:
            raise RuntimeError("server was created with record=False")
        self._flush_pending()
        if not self._chunks:
            return np.zeros((0, 5), dtype=np.int64)
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        return self._chunks[0]

    def drain_events(self):
        """Return (seq of the first event, events) recorded since the last drain
        and forget them; counters and digests are unaffected."""
        ev = self.event_array()
        base = self._drained
        self._chunks = []
        self._drained += len(ev)
        return base, ev

    def snapshot_trace(self):
        ev = self.event_array()
        events = tuple(
            AccessEvent(i, DIRS[d], a, ln, LABELS[r], v) for i, (d, a, ln, r, v) in enumerate(ev.tolist())
        )
        return Trace(events, len(events))

    def summary(self):
        c = self.counters
        return TraceSummary(
            io_count=int(c[C_IO]),
            reads=int(c[C_READS]),
            writes=int(c[C_WRITES]),
            shape_digest=f"{int(self.digest[0]):08x}{int(self.digest[1]):08x}",
            full_digest=f"{int(self.digest[2]):08x}{int(self.digest[3]):08x}",
            by_label={LABELS[i]: int(c[C_LABEL + i]) for i in range(len(LABELS))},
        )

    def clear_trace(self):
        """Forget the trace so far (counters, digests, stored events)."""
        self.counters[:] = 0
        self.digest[:] = 0
        self._chunks = []
        self._pending = []
        self._drained = 0


def export_csv(server, fh):
    fh.write("seq,dir,addr,len,region,version\n")
    for i, (d, a, ln, r, v) in enumerate(server.event_array().tolist()):
        fh.write(f"{i},{DIRS[d]},{a},{ln},{LABELS[r]},{v}\n")


_REC = struct.Struct("<QBQIBQ")


def export_binary(server, fh):
    """Length-prefixed records: u32 record size, then seq,dir,addr,len,region,version."""
    for i, (d, a, ln, r, v) in enumerate(server.event_array().tolist()):
        fh.write(struct.pack("<I", _REC.size))
        fh.write(_REC.pack(i, d, a, ln, r, v))


def read_binary(data):
    fh = io.BytesIO(data)
    out = []
    while True:
        head = fh.read(4)
        if not head:
            return out
        (size,) = struct.unpack("<I", head)
        seq, d, a, ln, r, v = _REC.unpack(fh.read(size))
        out.append(AccessEvent(seq, DIRS[d], a, ln, LABELS[r], v))
