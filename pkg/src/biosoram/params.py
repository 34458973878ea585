"""Size parameters and schedule constants derived from (n, B, M)."""

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """A configuration violates one of the parameter constraints.

    ``constraint`` names the violated rule so callers can report it.
    """

    def __init__(self, constraint, message):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


def is_power_of_two(x):
    return isinstance(x, int) and x > 0 and x & (x - 1) == 0


def ilog2(x):
    return x.bit_length() - 1


def ceil_log(x, base):
    """Smallest j >= 0 with base**j >= x, for integer x >= 1."""
    j, acc = 0, 1
    while acc < x:
        acc *= base
        j += 1
    return j


def ceil_sqrt(x):
    import math

    r = math.isqrt(x)
    return r if r * r == x else r + 1


def _is_power_of_16(x):
    return is_power_of_two(x) and ilog2(x) % 4 == 0


@dataclass(frozen=True)
class Config:
    n: int
    B: int
    M: int
    seed: int = 0

    def __post_init__(self):
        if not is_power_of_two(self.n):
            raise ConfigError("n-power-of-2", f"n={self.n} is not a power of 2")
        if not _is_power_of_16(self.B):
            raise ConfigError("B-power-of-16", f"B={self.B} is not a power of 16")
        lg = ilog2(self.n)
        if self.B < 3 * lg:
            raise ConfigError("B>=3log2(n)", f"B={self.B} < 3*log2(n)={3 * lg}")
        if self.M < self.B:
            raise ConfigError("M>=B", f"M={self.M} < B={self.B}")
        if self.B > self.n // 2:
            raise ConfigError("B<=n/2", f"B={self.B} > n/2={self.n // 2}")
        # A constant fraction of n; n itself is allowed so that the small
        # end of the test grid (n=2^10 with M=1024) is a valid point.
        if self.M > self.n:
            raise ConfigError("M<=n", f"M={self.M} > n={self.n}")
        if not 0 <= self.seed < 1 << 128:
            raise ConfigError("seed-128-bit", f"seed={self.seed} outside [0, 2^128)")


@dataclass(frozen=True)
class Params:
    n: int
    B: int
    M: int
    b_prime: int
    L: int
    bucket_cap: int
    leaf_cap: int
    subblock_words: int
    item_payload_words: int
    h_depth: int
    r_depth: int
    nonce_bits: int
    elem_words: int
    per_block: int
    unit: int

    @property
    def route_bits(self):
        return ilog2(self.b_prime)

    @property
    def tag_bits(self):
        # packed keys stay below 2^62 so that 2^62 can serve as +infinity
        return 62 - self.nonce_bits

    @property
    def n_leaves(self):
        return self.b_prime ** self.h_depth

    @property
    def slot_cap(self):
        return self.bucket_cap // self.b_prime


@dataclass(frozen=True)
class SmallOsParams:
    B: int
    b_prime: int
    cap: int
    d: int
    rebuild_period: int
    dummy_len: int
    cache_slots: int
    cache_words: int
    elem_words: int
    per_block: int
    unit: int

    @property
    def cache_reads(self):
        """Messages needed to read one level's cache wholesale."""
        return -(-self.cache_slots // self.per_block)


def element_words(b_prime):
    # header (kind, ident, key, aux) followed by a 2*B' word body
    return 2 * b_prime + 4


def _message_sizes(B, M, elem_words):
    per_block = B // elem_words
    # bulk primitives hold two units at once in private memory
    unit = min(per_block, M // (2 * elem_words))
    if per_block < 1 or unit < 1:
        raise ConfigError("element-fits-block", f"element of {elem_words} words does not fit")
    return per_block, unit


def derive_params(cfg):
    """Return the frozen Params for a validated Config."""
    n, B, M = cfg.n, cfg.B, cfg.M
    b_prime = 1 << (ilog2(B) // 4)
    L = 1 << (3 * ilog2(B) // 2)
    E = element_words(b_prime)
    per_block, unit = _message_sizes(B, M, E)
    return Params(
        n=n,
        B=B,
        M=M,
        b_prime=b_prime,
        L=L,
        bucket_cap=4 * L,
        leaf_cap=8 * L,
        subblock_words=b_prime,
        item_payload_words=2 * b_prime,
        h_depth=ceil_log(n // B, b_prime),
        r_depth=ceil_log(n // b_prime, b_prime),
        nonce_bits=ilog2(n),
        elem_words=E,
        per_block=per_block,
        unit=unit,
    )


def derive_small_os_params(p, cap):
    """Parameters of one small-set OS instance holding up to ``cap`` items."""
    if not isinstance(cap, int) or cap < 1 or cap > p.leaf_cap:
        raise ValueError(f"cap={cap} outside [1, {p.leaf_cap}]")
    return small_os_params(p.B, p.M, cap)


def small_os_params(B, M, cap):
    if cap < 1:
        raise ValueError(f"cap={cap} must be positive")
    b_prime = 1 << (ilog2(B) // 4)
    E = element_words(b_prime)
    per_block, unit = _message_sizes(B, M, E)
    d = 4 * max(1, ceil_log(cap, B))
    period = ceil_sqrt(cap)
    return SmallOsParams(
        B=B,
        b_prime=b_prime,
        cap=cap,
        d=d,
        rebuild_period=period,
        dummy_len=d * period,
        cache_slots=2 * period,
        cache_words=2 * period * E,
        elem_words=E,
        per_block=per_block,
        unit=unit,
    )


_KEYS = {"n": "n", "b": "B", "m": "M", "seed": "seed"}


def parse_config_text(text):
    """Parse ``key=value`` lines (n, B, M, seed); ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config-syntax", f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        field = _KEYS.get(key.lower())
        if field is None:
            raise ConfigError("config-syntax", f"line {lineno}: unknown key {key!r}")
        try:
            values[field] = int(value, 0)
        except ValueError:
            raise ConfigError("config-syntax", f"line {lineno}: {value!r} is not an integer") from None
    missing = [k for k in ("n", "B", "M") if k not in values]
    if missing:
        raise ConfigError("config-syntax", f"missing keys {missing}")
    return Config(**values)


def load_config(path):
    return parse_config_text(Path(path).read_text())
