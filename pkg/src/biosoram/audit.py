"""Security-game auditor and I/O overhead benchmark."""

import bisect
import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .oram import BiosORAM
from .params import Config, ConfigError, ilog2

SHAPE_COLS = [0, 2, 3]  # dir, len, region label


def chi2_uniform(counts):
    """(statistic, z-score) of observed counts against a uniform distribution.

    The z-score is (chi2 - df) / sqrt(2 df); |z| <= 5 is the usual
    "within 5 sigma" acceptance band.
    """
    counts = np.asarray(counts, dtype=np.float64)
    k = len(counts)
    total = counts.sum()
    if k < 2 or total == 0:
        return 0.0, 0.0
    exp = total / k
    stat = float(((counts - exp) ** 2 / exp).sum())
    df = k - 1
    return stat, (stat - df) / math.sqrt(2 * df)


class SlotAuditor:
    """Server-side replay check of the distinct-slot property.

    Uses only the recorded events and the public epoch schedule (the io
    ordinals at which each small-set instance finished a rebuild and
    started the next one): within an epoch no shuffled-array element may
    be read twice.
    """

    def __init__(self, iso):
        self.iso = iso
        self.server = iso.server
        self.by_region = {node.bucket.shuf.index: node.bucket for node in iso.nodes}
        self.region_bases = np.array([r.base for r in self.server.regions], dtype=np.int64)
        self.seen = {}
        self.violations = []
        self.reads_checked = 0
        self.epochs = set()

    def _window(self, bucket, seq):
        starts = [w[0] for w in bucket.windows]
        k = bisect.bisect_right(starts, seq) - 1
        if k >= 0 and seq < bucket.windows[k][1]:
            return k
        if bucket._window_start is not None and seq >= bucket._window_start:
            return len(bucket.windows)
        return None

    def feed(self, base, events):
        from .server import LABEL_CODE

        code = LABEL_CODE["shuffled-array"]
        sel = np.flatnonzero((events[:, 3] == code) & (events[:, 0] == 0))
        if not len(sel):
            return
        regions = np.searchsorted(self.region_bases, events[sel, 1], side="right") - 1
        for x, r in zip(sel.tolist(), regions.tolist()):
            bucket = self.by_region.get(r)
            if bucket is None:
                continue
            seq = base + x
            k = self._window(bucket, seq)
            if k is None:
                continue
            addr = int(events[x, 1])
            ident = (r, k)
            if self.seen.get(r, (None,))[0] != k:
                self.seen[r] = (k, set())
            slots = self.seen[r][1]
            self.reads_checked += 1
            self.epochs.add(ident)
            if addr in slots:
                self.violations.append(seq)
            slots.add(addr)


@dataclass
class GameResult:
    passed: bool
    first_divergence: object = None
    divergent_op: object = None
    events_compared: int = 0
    io_counts: tuple = ()
    shape_digests: tuple = ()
    slot_violations: int = 0
    first_slot_violation: object = None
    kernel_slot_violations: int = 0
    epochs_checked: int = 0
    leaf_chi2: float = 0.0
    leaf_z: float = 0.0
    isogrammic_violations: int = 0
    restarts: int = 0
    trials: int = 0
    notes: list = field(default_factory=list)

    @property
    def verdict(self):
        return "pass" if self.passed else "fail"


def _apply(oram, op):
    kind, i = op[0], op[1]
    if kind == "w":
        oram.write(i, op[2])
    else:
        oram.read(i)


def _first_diff(a, b):
    n = min(len(a), len(b))
    if n:
        bad = np.flatnonzero(np.any(a[:n] != b[:n], axis=1))
        if len(bad):
            return int(bad[0])
    return None if len(a) == len(b) else n


def play_security_game(seq1, seq2, cfg, trials=1, init="bulk", check_slots=True):
    """Run two access sequences side by side and compare what the server sees.

    ``seq1``/``seq2`` are lists of ('r', i) or ('w', i, v).  Each trial uses
    fresh sessions with independent seeds.  Traces are compared exactly
    event by event on (dir, len, region label), operation by operation; the
    first differing event ordinal is reported.
    """
    if len(seq1) != len(seq2):
        raise ValueError(f"sequence lengths differ: {len(seq1)} != {len(seq2)}")
    res = GameResult(passed=True, trials=trials)
    leaf = None
    seeds = np.random.SeedSequence(cfg.seed).spawn(2 * trials)
    for t in range(trials):
        sessions = []
        auditors = []
        for s in range(2):
            rng = np.random.default_rng(seeds[2 * t + s])
            oram = BiosORAM(cfg, record=True, init=init, rng=rng)
            sessions.append(oram)
            auditors.append(SlotAuditor(oram.os) if check_slots else None)
        a, b = sessions

        def step():
            chunks = []
            for oram, aud in zip(sessions, auditors):
                base, ev = oram.server.drain_events()
                if aud is not None:
                    aud.feed(base, ev)
                chunks.append((base, ev))
            (base, ea), (_, eb) = chunks
            res.events_compared += min(len(ea), len(eb))
            d = _first_diff(ea[:, SHAPE_COLS], eb[:, SHAPE_COLS])
            return None if d is None else base + d

        div = step()
        op_at = -1
        if div is None:
            for k, (x, y) in enumerate(zip(seq1, seq2)):
                _apply(a, x)
                _apply(b, y)
                div = step()
                if div is not None:
                    op_at = k
                    break
        if div is not None and res.first_divergence is None:
            res.first_divergence = div
            res.divergent_op = op_at
            res.passed = False
            res.notes.append(f"trial {t}: trace shapes diverge at event {div} (op {op_at})")
        sa, sb = a.server.summary(), b.server.summary()
        if sa.io_count != sb.io_count or sa.shape_digest != sb.shape_digest:
            res.passed = False
            res.notes.append(f"trial {t}: io_count/shape digest differ")
        res.io_counts += ((sa.io_count, sb.io_count),)
        res.shape_digests += ((sa.shape_digest, sb.shape_digest),)
        res.restarts += a.restarts + b.restarts
        for oram, aud in zip(sessions, auditors):
            if aud is not None:
                res.slot_violations += len(aud.violations)
                if aud.violations and res.first_slot_violation is None:
                    res.first_slot_violation = aud.violations[0]
                res.epochs_checked += len(aud.epochs)
            res.kernel_slot_violations += oram.os.slot_violations
            res.isogrammic_violations += len(oram.checker.violations)
            leaf = oram.os.leaf_visits if leaf is None else leaf + oram.os.leaf_visits
    if res.slot_violations or res.kernel_slot_violations:
        res.passed = False
        where = "" if res.first_slot_violation is None else f" (first at event {res.first_slot_violation})"
        res.notes.append(f"distinct-slot violations{where}")
    if res.isogrammic_violations:
        res.passed = False
        res.notes.append("isogrammic checker violations")
    res.leaf_chi2, res.leaf_z = chi2_uniform(leaf)
    return res


# standard sequence pairs


def pair_same_vs_random(n, length, rng):
    same = [("r", 0)] * length
    rand = [("r", int(i)) for i in rng.integers(0, n, length)]
    return same, rand


def adversarial_pairs(n, length, seed=0):
    """Five pairs of equal-length access sequences for the security game."""
    rng = np.random.default_rng(seed)
    pairs = {"same-index vs uniform-random": pair_same_vs_random(n, length, rng)}
    pairs["all-reads vs all-writes"] = (
        [("r", int(i)) for i in rng.integers(0, n, length)],
        [("w", int(i), int(v)) for i, v in zip(rng.integers(0, n, length), rng.integers(0, 1 << 40, length))],
    )
    pairs["sequential scan vs reverse scan"] = (
        [("r", i % n) for i in range(length)],
        [("r", (n - 1 - i) % n) for i in range(length)],
    )
    pairs["first cell vs last cell"] = ([("w", 0, 1)] * length, [("w", n - 1, 2)] * length)
    pairs["two-cell ping-pong vs random mix"] = (
        [("w" if k % 2 else "r", (k % 2) * (n // 2), k) if k % 2 else ("r", 0) for k in range(length)],
        [("w", int(i), k) if k % 3 == 0 else ("r", int(i)) for k, i in enumerate(rng.integers(0, n, length))],
    )
    return pairs


# benchmark

BENCH_COLUMNS = ["n", "B", "M", "N", "total_io", "amortized_io", "predicted", "ratio", "restarts", "compressions",
                 "wall_ms"]


@dataclass
class BenchRow:
    n: int
    B: int
    M: int
    N: int
    total_io: int = 0
    amortized_io: float = 0.0
    predicted: float = 0.0
    ratio: float = 0.0
    restarts: int = 0
    compressions: int = 0
    wall_ms: float = 0.0
    error: str = ""

    def values(self, wall=True):
        return [self.n, self.B, self.M, self.N, self.total_io, f"{self.amortized_io:.3f}", f"{self.predicted:.4f}",
                f"{self.ratio:.3f}", self.restarts, self.compressions, f"{self.wall_ms:.1f}" if wall else "0"]


def predicted_overhead(n, B):
    return (ilog2(n) / ilog2(B)) ** 2


def bench_point(n, B, M, N, seed=0, init="bulk", steady=False):
    """Amortized I/O of N random accesses; ``steady`` starts from full-size leaves."""
    if N <= 0:
        raise ValueError("a benchmark point needs N > 0 operations")
    cfg = Config(n, B, M, seed)
    oram = BiosORAM(cfg, init=init)
    if steady:
        oram.os.settle_leaves()
    oram.server.clear_trace()
    rng = np.random.default_rng(seed + 1)
    idx = rng.integers(0, n, N)
    writes = rng.random(N) < 0.5
    vals = rng.integers(0, 1 << 40, N)
    t0 = time.perf_counter()
    for i, w, v in zip(idx.tolist(), writes.tolist(), vals.tolist()):
        if w:
            oram.write(i, v)
        else:
            oram.read(i)
    wall = (time.perf_counter() - t0) * 1e3
    total = oram.server.io_count
    pred = predicted_overhead(n, B)
    amort = total / N
    return BenchRow(n, B, M, N, total, amort, pred, amort / pred, oram.restarts, oram.os.compressions, wall)


def bench_overhead(grid, N, seed=0, init="bulk", steady=False):
    """One BenchRow per (n, B, M) point; invalid points carry ``error``."""
    if N <= 0:
        raise ValueError("N must be positive")
    rows = []
    for n, B, M in sorted(grid):
        try:
            rows.append(bench_point(n, B, M, N, seed, init, steady))
        except (ConfigError, ValueError) as exc:
            rows.append(BenchRow(n, B, M, N, error=str(exc)))
    return rows


def rows_to_csv(rows, fh, wall=True):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        if not r.error:
            w.writerow(r.values(wall))


def rows_to_jsonl(rows, fh, wall=True):
    import json

    for r in rows:
        if r.error:
            continue
        rec = dict(zip(BENCH_COLUMNS, r.values(wall)))
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_plot(rows, prefix):
    """Write ``prefix.dat`` (n, ratio) and a gnuplot script ``prefix.gp``."""
    with open(f"{prefix}.dat", "w") as fh:
        fh.write("# log2n ratio amortized_io\n")
        for r in rows:
            if not r.error:
                fh.write(f"{ilog2(r.n)} {r.ratio:.4f} {r.amortized_io:.2f}\n")
    name = prefix.rsplit("/", 1)[-1]
    with open(f"{prefix}.gp", "w") as fh:
        fh.write(
            "set terminal pngcairo size 800,500\n"
            f"set output '{name}.png'\n"
            "set xlabel 'log2 n'\n"
            "set ylabel 'amortized I/O / (log n / log B)^2'\n"
            "set grid\n"
            f"plot '{name}.dat' using 1:2 with linespoints title 'ratio'\n"
        )


def band(rows):
    """max/min ratio over the valid rows (1.0 means perfectly flat)."""
    ratios = [r.ratio for r in rows if not r.error]
    return max(ratios) / min(ratios) if ratios else float("nan")


def export_io_crosscheck(oram):
    """Compare the server's io_count with the number of rows in its CSV export."""
    from .server import export_csv

    buf = io.StringIO()
    export_csv(oram.server, buf)
    lines = buf.getvalue().count("\n") - 1
    return oram.server.io_count, lines


# oracle and adapter demos


@dataclass
class DemoResult:
    name: str
    ops: int
    mismatches: int = 0
    first_mismatch: object = None
    shape_divergence: object = None
    iso_ops_per_op: object = None
    isogrammic_violations: int = 0
    restarts: int = 0
    notes: list = field(default_factory=list)

    @property
    def passed(self):
        return (self.mismatches == 0 and self.shape_divergence is None and self.isogrammic_violations == 0
                and self.iso_ops_per_op is not None)


def _lockstep(make, script_a, script_b):
    """Run two op scripts on fresh stores, comparing trace shapes after every op.

    ``make(seed_index)`` returns (store, runner) where runner(op) performs
    one logical operation and returns its result.  Returns (results of the
    first script, first divergent event ordinal or None, stores).
    """
    (sa, ra), (sb, rb) = make(0), make(1)
    out = []
    div = None
    for x, y in zip(script_a, script_b):
        out.append(ra(x))
        rb(y)
        (base, ea), (_, eb) = sa.server.drain_events(), sb.server.drain_events()
        d = _first_diff(ea[:, SHAPE_COLS], eb[:, SHAPE_COLS])
        if d is not None:
            div = base + d
            break
    return out, div, (sa, sb)


def run_oracle_check(cfg, ops, init="bulk", seed=None):
    """ORAM against a plain array under random mixed reads and writes."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    mem = rng.integers(0, 1 << 40, cfg.n)
    oram = BiosORAM(cfg, memory=mem, init=init)
    ref = mem.copy()
    res = DemoResult("oracle-check", ops, iso_ops_per_op=oram.iso_ops_per_access)
    before = oram.os.total_ops
    for k in range(ops):
        i = int(rng.integers(0, cfg.n))
        if rng.random() < 0.5:
            v = int(rng.integers(0, 1 << 40))
            got = oram.access(i, v)
            want, ref[i] = int(ref[i]), v
        else:
            got, want = oram.read(i), int(ref[i])
        if got != want:
            res.mismatches += 1
            if res.first_mismatch is None:
                res.first_mismatch = k
    if oram.os.total_ops - before != ops * oram.iso_ops_per_access:
        res.iso_ops_per_op = None
        res.notes.append("storage op count per access is not constant")
    res.isogrammic_violations = len(oram.checker.violations)
    res.restarts = oram.restarts
    return res


def _store(cfg, k):
    from .adapters import make_storage

    sub = Config(cfg.n, cfg.B, cfg.M, (cfg.seed * 2 + k) % (1 << 128))
    return make_storage(sub, record=True, debug=True)


def run_queue_demo(cfg, ops, capacity=64):
    """Random queue script vs a deque; traces compared against an all-noop script."""
    import collections

    from .adapters import IsoQueue

    rng = np.random.default_rng(cfg.seed)
    script = [("e", k) if r < 0.45 else ("d",) if r < 0.9 else ("n",) for k, r in enumerate(rng.random(ops))]
    queues = {}

    def make(k):
        st = _store(cfg, k)
        q = IsoQueue(st, capacity=capacity)
        queues[k] = q
        return st, lambda op: q.enqueue(op[1]) if op[0] == "e" else q.dequeue() if op[0] == "d" else q.noop()

    out, div, stores = _lockstep(make, script, [("n",)] * ops)
    res = DemoResult("demo-queue", ops, shape_divergence=div)
    ref = collections.deque()
    for k, (op, got) in enumerate(zip(script, out)):
        if op[0] == "e":
            want = len(ref) < capacity
            if want:
                ref.append(op[1])
        elif op[0] == "d":
            want = ref.popleft() if ref else None
        else:
            want = got
        if got != want:
            res.mismatches += 1
            if res.first_mismatch is None:
                res.first_mismatch = k
    q = queues[0]
    res.iso_ops_per_op = 1 if q.iso_ops == len(out) and queues[1].iso_ops == len(out) else None
    res.isogrammic_violations = sum(len(s.checker.violations) for s in stores)
    res.restarts = sum(s.restarts for s in stores)
    if div is not None:
        res.notes.append(f"iso_adapters: queue traces diverge at event {div}")
    return res


def run_tree_demo(cfg, ops, capacity=1000, key_range=700):
    """Random AVL inserts/searches vs a dict; traces compared against searches of one key."""
    from .adapters import IsoAVL

    rng = np.random.default_rng(cfg.seed)
    keys = rng.integers(0, key_range, ops)
    kinds = rng.random(ops) < 0.5
    script = [("i", int(k), j) if w else ("s", int(k)) for j, (k, w) in enumerate(zip(keys.tolist(), kinds.tolist()))]
    trees = {}

    def make(k):
        st = _store(cfg, k)
        t = IsoAVL(st, capacity)
        trees[k] = t
        return st, lambda op: t.insert(op[1], op[2]) if op[0] == "i" else t.search(op[1])

    out, div, stores = _lockstep(make, script, [("s", 0)] * ops)
    res = DemoResult("demo-tree", ops, shape_divergence=div)
    ref = {}
    for k, (op, got) in enumerate(zip(script, out)):
        if op[0] == "i":
            want = op[1] not in ref
            ref[op[1]] = op[2]
        else:
            want = ref.get(op[1])
        if got != want:
            res.mismatches += 1
            if res.first_mismatch is None:
                res.first_mismatch = k
    t = trees[0]
    budget = t.ods.budget
    res.iso_ops_per_op = budget if t.ods.iso_ops == budget * len(out) else None
    res.isogrammic_violations = sum(len(s.checker.violations) for s in stores)
    res.restarts = sum(s.restarts for s in stores)
    if div is not None:
        res.notes.append(f"iso_adapters: tree traces diverge at event {div}")
    return res
