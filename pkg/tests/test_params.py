import math

import pytest

from biosoram.params import (
    Config,
    ConfigError,
    derive_params,
    derive_small_os_params,
    parse_config_text,
    load_config,
    small_os_params,
)


def test_reference_point_2_16():
    p = derive_params(Config(2**16, 256, 1024))
    assert (p.b_prime, p.L, p.bucket_cap, p.leaf_cap, p.h_depth) == (4, 4096, 16384, 32768, 4)


def test_reference_point_2_12():
    p = derive_params(Config(2**12, 256, 256))
    assert (p.b_prime, p.L, p.h_depth) == (4, 4096, 2)


def _independent(n, B):
    # float-free recomputation of each formula
    bp = round(B ** 0.25)
    L = round(B ** 1.5)
    h = 0
    while bp**h < n // B:
        h += 1
    r = 0
    while bp**r < n // bp:
        r += 1
    return bp, L, 4 * L, 8 * L, h, r, int(math.log2(n))


@pytest.mark.parametrize("n", [2**10, 2**12, 2**14, 2**16, 2**18, 2**20])
def test_against_independent_formulas(n):
    p = derive_params(Config(n, 256, 1024))
    assert (p.b_prime, p.L, p.bucket_cap, p.leaf_cap, p.h_depth, p.r_depth, p.nonce_bits) == _independent(n, 256)


@pytest.mark.parametrize(
    "kw, rule",
    [
        (dict(n=2**16, B=16, M=64), "B>=3log2(n)"),
        (dict(n=1000, B=256, M=1024), "n-power-of-2"),
        (dict(n=2**16, B=64, M=1024), "B-power-of-16"),
        (dict(n=2**16, B=256, M=128), "M>=B"),
        (dict(n=2**8, B=256, M=256), "B<=n/2"),
        (dict(n=2**12, B=256, M=2**13), "M<=n"),
    ],
)
def test_rejections_name_the_rule(kw, rule):
    with pytest.raises(ConfigError) as exc:
        Config(**kw)
    assert exc.value.constraint == rule
    assert rule in str(exc.value)


def test_small_os_examples():
    a = small_os_params(256, 1024, 4096)
    assert (a.d, a.rebuild_period, a.dummy_len) == (8, 64, 512)
    b = small_os_params(256, 1024, 1)
    assert (b.d, b.rebuild_period, b.dummy_len) == (4, 1, 4)
    c = small_os_params(256, 1024, 32768)
    assert (c.d, c.rebuild_period, c.dummy_len) == (8, 182, 1456)


@pytest.mark.parametrize("cap", [1, 2, 100, 255, 256, 257, 4096, 20000, 32768])
def test_small_os_formulas(cap):
    s = small_os_params(256, 1024, cap)
    assert s.d == 4 * max(1, math.ceil(round(math.log2(cap), 9) / 8))
    assert s.rebuild_period == math.isqrt(cap - 1) + 1
    assert s.dummy_len == s.d * s.rebuild_period
    assert s.cache_slots == 2 * s.rebuild_period


def test_small_os_cap_range():
    p = derive_params(Config(2**12, 256, 1024))
    with pytest.raises(ValueError):
        derive_small_os_params(p, 0)
    with pytest.raises(ValueError):
        derive_small_os_params(p, p.leaf_cap + 1)


def test_identities_and_purity():
    for n in (2**10, 2**14, 2**20):
        cfg = Config(n, 256, 1024)
        p = derive_params(cfg)
        assert p.b_prime**4 == p.B
        assert p.L**2 == p.B**3
        assert derive_params(cfg) == p


def test_config_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# bench point\nn = 4096\nB=256\nM=1024\nseed=0x10\n")
    assert load_config(f) == Config(4096, 256, 1024, 16)
    with pytest.raises(ConfigError):
        parse_config_text("n=4096\nB=256\n")
    with pytest.raises(ConfigError):
        parse_config_text("n=4096\nB=256\nM=1024\ncolor=3\n")
