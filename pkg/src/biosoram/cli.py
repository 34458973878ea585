"""Command-line front end: benchmarks, the security audit, trace dumps and demos.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage or
configuration errors.
"""

import argparse
import json
import sys

import numpy as np

from . import audit
from .oram import BiosORAM
from .params import Config, ConfigError, load_config
from .server import export_binary, export_csv

DEFAULTS = {"n": 4096, "B": 256, "M": 1024, "seed": 0}


class UsageError(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=int, action="append", help="memory size in words (bench: repeatable)")
    common.add_argument("--b", type=int, help="message block size B in words")
    common.add_argument("--m", type=int, help="client memory M in words")
    common.add_argument("--seed", type=int, help="PRNG seed")
    common.add_argument("--ops", type=int, help="operations to run")
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument("--config", help="key=value file with n, B, M, seed")

    ap = argparse.ArgumentParser(prog="biosoram", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("bench", parents=[common], help="amortized I/O per ORAM access over a grid of n")
    b.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    b.add_argument("--plot", help="write PREFIX.dat and PREFIX.gp for gnuplot")
    b.add_argument("--wall", action="store_true", help="report wall-clock time (output is then not reproducible)")
    b.add_argument("--steady", action="store_true", help="start from post-compression leaf sizes (leaf storage is "
                   "then 4*n*sqrt(B) elements)")

    a = sub.add_parser("audit", parents=[common], help="security game over five adversarial sequence pairs")
    a.add_argument("--trials", type=int, default=1)
    a.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")

    t = sub.add_parser("trace-dump", parents=[common], help="record the trace of random ORAM accesses")
    t.add_argument("--format", choices=["csv", "jsonl", "bin"], default="csv")

    for name, text in [("demo-queue", "isogrammic queue vs a deque"), ("demo-tree", "isogrammic AVL tree vs a dict"),
                       ("oracle-check", "ORAM vs a plain array")]:
        d = sub.add_parser(name, parents=[common], help=text)
        d.add_argument("--format", choices=["csv", "jsonl"], default="jsonl")
    return ap


def _config(args, n=None):
    vals = dict(DEFAULTS)
    if args.config:
        c = load_config(args.config)
        vals.update(n=c.n, B=c.B, M=c.M, seed=c.seed)
    if n is not None:
        vals["n"] = n
    elif args.n:
        if len(args.n) > 1:
            raise UsageError("--n given more than once")
        vals["n"] = args.n[0]
    for flag, key in (("b", "B"), ("m", "M"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            vals[key] = getattr(args, flag)
    return Config(vals["n"], vals["B"], vals["M"], vals["seed"])


def _ops(args, default):
    ops = default if args.ops is None else args.ops
    if ops < 0:
        raise UsageError("--ops must be non-negative")
    return ops


class _Output:
    def __init__(self, path, binary=False):
        self.path = path
        self.binary = binary

    def __enter__(self):
        if self.path is None:
            self.fh = sys.stdout.buffer if self.binary else sys.stdout
        else:
            self.fh = open(self.path, "wb" if self.binary else "w", newline="" if not self.binary else None)
        return self.fh

    def __exit__(self, *exc):
        if self.path is not None:
            self.fh.close()
        else:
            self.fh.flush()


def _records(fmt, fh, records):
    if fmt == "jsonl":
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
    else:
        keys = list(records[0]) if records else []
        fh.write(",".join(keys) + "\n")
        for rec in records:
            fh.write(",".join(str(rec[k]) for k in keys) + "\n")


def cmd_bench(args):
    ops = _ops(args, 1000)
    if ops == 0:
        raise UsageError("bench needs --ops > 0")
    ns = args.n or [2**12, 2**16, 2**20]
    vals = dict(DEFAULTS)
    if args.config:
        c = load_config(args.config)
        vals.update(B=c.B, M=c.M, seed=c.seed)
    B = vals["B"] if args.b is None else args.b
    M = vals["M"] if args.m is None else args.m
    seed = vals["seed"] if args.seed is None else args.seed
    rows = audit.bench_overhead([(n, B, M) for n in ns], ops, seed=seed, steady=args.steady)
    for r in rows:
        if r.error:
            print(f"param_engine: point n={r.n} B={r.B} M={r.M} rejected: {r.error}", file=sys.stderr)
    with _Output(args.out) as fh:
        (audit.rows_to_csv if args.format == "csv" else audit.rows_to_jsonl)(rows, fh, wall=args.wall)
    if args.plot:
        audit.write_plot(rows, args.plot)
    valid = [r for r in rows if not r.error]
    if valid:
        print(f"overhead constant (mean ratio) {np.mean([r.ratio for r in valid]):.3f}, "
              f"band max/min {audit.band(valid):.3f}", file=sys.stderr)
    return 0 if valid else 1


def cmd_audit(args):
    cfg = _config(args)
    length = _ops(args, 1000)
    pairs = audit.adversarial_pairs(cfg.n, length, seed=cfg.seed)
    records = []
    ok = True
    for name, (s1, s2) in pairs.items():
        res = audit.play_security_game(s1, s2, cfg, trials=args.trials)
        ok &= res.passed
        records.append({
            "pair": name, "verdict": res.verdict, "events_compared": res.events_compared,
            "first_divergence": res.first_divergence, "divergent_op": res.divergent_op,
            "slot_violations": res.slot_violations, "first_slot_violation": res.first_slot_violation,
            "epochs_checked": res.epochs_checked, "leaf_chi2": round(res.leaf_chi2, 4), "leaf_z": round(res.leaf_z, 4),
            "isogrammic_violations": res.isogrammic_violations, "restarts": res.restarts,
            "shape_digest": res.shape_digests[0][0] if res.shape_digests else "",
        })
        if res.first_divergence is not None:
            print(f"bios_oram: pair '{name}' trace shapes diverge at event {res.first_divergence}", file=sys.stderr)
        if res.first_slot_violation is not None:
            print(f"small_set_os: pair '{name}' repeats a shuffled slot at event {res.first_slot_violation}",
                  file=sys.stderr)
        if res.isogrammic_violations:
            print(f"isogrammic_os: pair '{name}' has {res.isogrammic_violations} stream violations", file=sys.stderr)
    with _Output(args.out) as fh:
        _records(args.format, fh, records)
    print(f"audit {'pass' if ok else 'fail'}: {len(records)} pairs, n={cfg.n} B={cfg.B} M={cfg.M} ops={length}",
          file=sys.stderr)
    return 0 if ok else 1


def cmd_trace_dump(args):
    cfg = _config(args)
    ops = _ops(args, 100)
    oram = BiosORAM(cfg, record=True, init="bulk")
    rng = np.random.default_rng(cfg.seed)
    for i in rng.integers(0, cfg.n, ops).tolist():
        oram.read(i)
    srv = oram.server
    if args.format == "bin":
        with _Output(args.out, binary=True) as fh:
            export_binary(srv, fh)
    elif args.format == "csv":
        with _Output(args.out) as fh:
            export_csv(srv, fh)
    else:
        from .server import DIRS, LABELS

        with _Output(args.out) as fh:
            for k, (d, a, ln, r, v) in enumerate(srv.event_array().tolist()):
                fh.write(json.dumps({"seq": k, "dir": DIRS[d], "addr": a, "len": ln, "region": LABELS[r],
                                     "version": v}) + "\n")
    return 0


def _demo(args, res):
    rec = {"demo": res.name, "ops": res.ops, "pass": res.passed, "mismatches": res.mismatches,
           "first_mismatch": res.first_mismatch, "shape_divergence": res.shape_divergence,
           "iso_ops_per_op": res.iso_ops_per_op, "isogrammic_violations": res.isogrammic_violations,
           "restarts": res.restarts}
    with _Output(args.out) as fh:
        _records(args.format, fh, [rec])
    for note in res.notes:
        print(note, file=sys.stderr)
    return 0 if res.passed else 1


def cmd_demo_queue(args):
    return _demo(args, audit.run_queue_demo(_config(args), _ops(args, 10_000)))


def cmd_demo_tree(args):
    return _demo(args, audit.run_tree_demo(_config(args), _ops(args, 10_000)))


def cmd_oracle_check(args):
    return _demo(args, audit.run_oracle_check(_config(args), _ops(args, 10_000)))


COMMANDS = {
    "bench": cmd_bench,
    "audit": cmd_audit,
    "trace-dump": cmd_trace_dump,
    "demo-queue": cmd_demo_queue,
    "demo-tree": cmd_demo_tree,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None):
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError) as exc:
        print(f"biosoram {args.cmd}: {exc}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
