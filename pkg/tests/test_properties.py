import collections
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from biosoram import _kernels as K
from biosoram.adapters import IsoQueue, make_storage
from biosoram.isoos import IsoChecker, IsogrammicOS, IsoKey
from biosoram.oblivious import BulkIO, oblivious_shuffle, oblivious_sort
from biosoram.oram import BiosORAM
from biosoram.params import Config, ConfigError, derive_params, derive_small_os_params
from biosoram.server import SimServer
from biosoram.smallos import standalone

SLOW = settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
FAST = settings(max_examples=200, deadline=None)


@st.composite
def configs(draw):
    B = draw(st.sampled_from([16, 256, 4096]))
    lo = max(B.bit_length(), 2)  # n >= 2B
    n = 1 << draw(st.integers(lo, 40))
    M = draw(st.sampled_from([B, 2 * B, 4 * B, n]))
    return n, B, min(M, n), draw(st.integers(0, 2**32))


@FAST
@given(configs())
def test_params_identities(args):
    try:
        cfg = Config(*args)
    except ConfigError as exc:
        assert exc.constraint == "B>=3log2(n)" and args[1] < 3 * math.log2(args[0])
        return
    p = derive_params(cfg)
    assert p == derive_params(cfg)
    assert p.b_prime**4 == cfg.B and p.L**2 == cfg.B**3
    assert p.bucket_cap == 4 * p.L and p.leaf_cap == 8 * p.L
    lb = math.log2(p.b_prime)
    need = math.log2(cfg.n // cfg.B)
    assert p.h_depth * lb >= need > (p.h_depth - 1) * lb or (need == 0 and p.h_depth == 0)
    assert p.b_prime**p.h_depth >= cfg.n // cfg.B


@FAST
@given(st.integers(1, 32768))
def test_small_os_param_formulas(cap):
    sp = derive_small_os_params(derive_params(Config(2**16, 256, 1024)), cap)
    assert sp.d == 4 * max(1, math.ceil(math.log2(cap) / 8 - 1e-12))
    assert sp.rebuild_period == math.isqrt(cap - 1) + 1
    assert sp.dummy_len == sp.d * sp.rebuild_period


@FAST
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 63), st.integers(1, 16)), max_size=60))
def test_server_accounting(ops):
    srv = SimServer(256)
    r = srv.alloc("bucket", 64 * 16, 16)
    ops = [(w, slot, 16 * ln) for w, slot, ln in ops]
    versions = set()
    for is_write, slot, ln in ops:
        if is_write:
            versions.add(srv.write_block(r.base + slot * 256, np.zeros(ln, dtype=np.int64)))
        else:
            srv.read_block(r.base + slot * 256, ln)
    ev = srv.event_array()
    assert srv.io_count == len(ops) == len(ev)
    assert len(versions) == sum(o[0] for o in ops)
    assert np.all(ev[:, 2] <= 256)


def _rows(keys):
    rows = np.zeros((len(keys), 12), dtype=np.int64)
    rows[:, K.KIND] = K.ITEM
    rows[:, K.KEY] = keys
    rows[:, K.BODY] = np.arange(len(keys))
    return rows


@FAST
@given(st.lists(st.integers(-2**40, 2**40), min_size=1, max_size=120), st.integers(0, 2**31))
def test_sort_matches_reference_and_is_size_determined(keys, seed):
    traces = []
    for variant in (keys, sorted(keys)):
        srv = SimServer(256)
        a = srv.alloc("scratch", len(keys), 12).array()
        bulk = BulkIO(srv, 21, 21)
        bulk.scan_write(a, _rows(variant))
        oblivious_sort(bulk, a, lambda r: [r[:, K.KEY]], np.random.default_rng(seed))
        assert a.view()[:, K.KEY].tolist() == sorted(keys)
        traces.append(srv.event_array()[:, :4])
    assert np.array_equal(traces[0], traces[1])


@FAST
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=80, unique=True), st.integers(0, 2**31))
def test_shuffle_is_a_permutation(keys, seed):
    srv = SimServer(256)
    a = srv.alloc("scratch", len(keys), 12).array()
    bulk = BulkIO(srv, 21, 21)
    bulk.scan_write(a, _rows(keys))
    oblivious_shuffle(bulk, a, np.random.default_rng(seed))
    assert sorted(a.view()[:, K.KEY].tolist()) == sorted(keys)


ops_strategy = st.lists(st.tuples(st.sampled_from("pgn"), st.integers(0, 40)), max_size=150)


@SLOW
@given(ops_strategy, st.integers(0, 1000))
def test_small_os_is_a_map(ops, seed):
    o = standalone(256, 1024, 64, seed=seed)
    ref = {}
    for kind, k in ops:
        if kind == "p" and k not in ref and len(ref) < 64:
            o.put(k, [k + 1])
            ref[k] = k + 1
        elif kind == "g":
            v = o.get(k)
            assert (v is None) == (k not in ref)
            if v is not None:
                assert v[0] == ref.pop(k)
        else:
            o.noop()


@SLOW
@given(st.lists(st.sampled_from("pgn"), min_size=1, max_size=100), st.integers(0, 1000))
def test_small_os_shape_depends_only_on_position(kinds, seed):
    def run(script):
        o = standalone(256, 1024, 64, seed=seed)
        live = []
        for i, kind in enumerate(script):
            if kind == "p" and len(live) < 64:
                o.put(1000 + i, [i])
                live.append(1000 + i)
            elif kind == "g" and live:
                o.get(live.pop())
            else:
                o.noop()
        return o.server.event_array()[:, [0, 2, 3]]

    assert np.array_equal(run(kinds), run(["n"] * len(kinds)))


@SLOW
@given(st.lists(st.booleans(), max_size=300), st.integers(0, 1000))
def test_isoos_oracle_and_checker(coins, seed):
    p = derive_params(Config(2**10, 256, 1024))
    s = IsogrammicOS(p, np.random.default_rng(seed), debug=True, checker=IsoChecker(p.nonce_bits, p.tag_bits))
    rng = np.random.default_rng(seed + 1)
    live = {}
    for t, put in enumerate(coins):
        if put or not live:
            k = IsoKey(int(rng.integers(0, 1 << p.nonce_bits)), t)
            s.iso_put(k, [t])
            live[k] = t
        else:
            k = next(iter(live))
            assert s.iso_get(k)[0] == live.pop(k)
    assert s.checker.ok
    assert s.check_path_invariant() == len(live)


@SLOW
@given(st.lists(st.tuples(st.integers(0, 1023), st.one_of(st.none(), st.integers(0, 2**40))), max_size=60),
       st.integers(0, 1000))
def test_oram_is_an_array(ops, seed):
    o = BiosORAM(Config(2**10, 256, 1024, seed=seed), init="bulk", debug=True)
    ref = np.zeros(2**10, dtype=np.int64)
    for i, v in ops:
        assert o.access(i, v) == ref[i]
        if v is not None:
            ref[i] = v
    assert o.checker.ok


@SLOW
@given(st.lists(st.integers(0, 1023), min_size=1, max_size=40), st.lists(st.integers(0, 1023), min_size=1,
                                                                          max_size=40))
def test_oram_trace_independence(a, b):
    m = min(len(a), len(b))

    def shape(seed, cells):
        o = BiosORAM(Config(2**10, 256, 1024, seed=seed), init="bulk", record=True)
        for i in cells[:m]:
            o.read(i)
        return o.server.event_array()[:, [0, 2, 3]]

    assert np.array_equal(shape(1, a), shape(2, b))


@SLOW
@given(st.lists(st.sampled_from("edn"), max_size=200))
def test_queue_matches_deque(script):
    q = IsoQueue(make_storage(Config(2**10, 256, 1024, seed=2)), capacity=16)
    ref = collections.deque()
    for i, op in enumerate(script):
        if op == "e":
            assert q.enqueue(i) == (len(ref) < 16)
            if len(ref) < 16:
                ref.append(i)
        elif op == "d":
            assert q.dequeue() == (ref.popleft() if ref else None)
        else:
            q.noop()
    assert q.iso_ops == len(script) and q.store.checker.ok


@FAST
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 15)), max_size=80))
def test_checker_matches_model(ops):
    c = IsoChecker(10, 52)
    live, used, bad = set(), set(), 0
    for is_put, k in ops:
        key = (k << 52) | k
        if is_put:
            bad += (key in live) + (key in used)
            live.add(key)
            used.add(key)
            c.on_put(key)
        else:
            bad += key not in live
            live.discard(key)
            c.on_get(key)
    got = [v for v in c.violations if v[1] != "key-gotten-twice"]
    assert len(got) == bad
