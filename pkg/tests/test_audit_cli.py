import json

import numpy as np
import pytest

from biosoram import audit, cli
from biosoram.isoos import IsoKey
from biosoram.oram import BiosORAM
from biosoram.params import Config
from biosoram.server import LABEL_CODE

CFG = Config(2**10, 256, 1024, seed=0)


def test_chi2_uniform():
    assert audit.chi2_uniform([5, 5, 5, 5]) == (0.0, pytest.approx(-3 / np.sqrt(6)))
    stat, z = audit.chi2_uniform([10, 0])
    assert stat == 10.0 and z == pytest.approx((10 - 1) / np.sqrt(2))
    stats = pytest.importorskip("scipy.stats")
    counts = np.random.default_rng(0).integers(20, 40, 16)
    assert audit.chi2_uniform(counts)[0] == pytest.approx(stats.chisquare(counts).statistic)


def test_game_passes_on_identical_and_adversarial_pair():
    seq = [("r", 3)] * 40
    res = audit.play_security_game(seq, seq, CFG)
    assert res.passed and res.first_divergence is None and res.events_compared > 0
    s1, s2 = audit.adversarial_pairs(CFG.n, 120)["first cell vs last cell"]
    res = audit.play_security_game(s1, s2, CFG, trials=2)
    assert res.passed, res.notes
    assert res.epochs_checked > 0 and res.slot_violations == 0 and res.isogrammic_violations == 0


def test_game_catches_a_leak(monkeypatch):
    class Leaky(BiosORAM):
        def access(self, i, value=None):
            if i == 0:
                self.os.iso_get(IsoKey(0, (1 << self.p.tag_bits) - 1))
            return super().access(i, value)

    monkeypatch.setattr(audit, "BiosORAM", Leaky)
    res = audit.play_security_game([("r", 1), ("r", 0)], [("r", 1), ("r", 2)], CFG, check_slots=False)
    assert not res.passed and res.verdict == "fail"
    assert res.divergent_op == 1 and res.first_divergence is not None


def test_game_length_mismatch():
    with pytest.raises(ValueError, match="lengths differ"):
        audit.play_security_game([("r", 0)], [], CFG)


def test_adversarial_pairs_shape():
    pairs = audit.adversarial_pairs(64, 30)
    assert len(pairs) == 5
    for a, b in pairs.values():
        assert len(a) == len(b) == 30
        assert all(0 <= op[1] < 64 for op in a + b)


def test_slot_auditor_flags_a_repeated_slot():
    o = BiosORAM(CFG, record=True, init="bulk")
    for i in range(30):
        o.read(i)
    base, ev = o.server.drain_events()
    clean = audit.SlotAuditor(o.os)
    clean.feed(base, ev)
    assert clean.reads_checked > 0 and not clean.violations
    probe = audit.SlotAuditor(o.os)
    sel = np.flatnonzero((ev[:, 3] == LABEL_CODE["shuffled-array"]) & (ev[:, 0] == 0))
    regions = np.searchsorted(probe.region_bases, ev[sel, 1], side="right") - 1
    for (x, rx), (y, ry) in zip(zip(sel, regions), zip(sel[1:], regions[1:])):
        b = probe.by_region.get(rx)
        if b is not None and rx == ry and probe._window(b, base + x) == probe._window(b, base + y) is not None:
            break
    else:
        pytest.skip("no two shuffled reads share a window")
    bad = ev.copy()
    bad[y, 1] = bad[x, 1]
    probe.feed(base, bad)
    assert probe.violations == [base + y]


def test_bench_point_and_errors():
    row = audit.bench_point(2**12, 256, 1024, 20)
    assert row.total_io > 0 and row.ratio == pytest.approx(row.amortized_io / row.predicted)
    assert row.predicted == pytest.approx((12 / 8) ** 2)
    with pytest.raises(ValueError):
        audit.bench_point(2**12, 256, 1024, 0)
    rows = audit.bench_overhead([(2**12, 256, 1024), (1000, 256, 1024)], 5)
    assert rows[0].error and "power" in rows[0].error and not rows[1].error


def test_io_crosscheck():
    o = BiosORAM(CFG, record=True, init="bulk")
    o.read(1)
    count, lines = audit.export_io_crosscheck(o)
    assert count == lines


def test_demos_small():
    assert audit.run_oracle_check(CFG, 200).passed
    q = audit.run_queue_demo(CFG, 300)
    assert q.passed and q.iso_ops_per_op == 1
    t = audit.run_tree_demo(CFG, 40, capacity=60, key_range=40)
    assert t.passed


def test_cli_exit_codes(capsys):
    assert cli.main(["nope"]) == 2
    assert cli.main(["bench", "--n", "1000", "--ops", "5"]) == 1
    assert "param_engine" in capsys.readouterr().err
    assert cli.main(["bench", "--ops", "0"]) == 2
    assert cli.main(["oracle-check", "--n", "1024", "--ops", "50"]) == 0
    assert cli.main(["oracle-check", "--n", "1024", "--b", "64"]) == 2


def test_cli_bench_deterministic(tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"b{k}.csv"
        assert cli.main(["bench", "--n", "4096", "--ops", "20", "--out", str(path), "--plot",
                         str(tmp_path / "plot")]) == 0
        outs.append(path.read_text())
    assert outs[0] == outs[1]
    header, row = outs[0].splitlines()
    assert header.split(",") == audit.BENCH_COLUMNS and row.endswith(",0")
    assert (tmp_path / "plot.dat").exists() and (tmp_path / "plot.gp").exists()


def test_cli_audit_report(tmp_path):
    path = tmp_path / "audit.jsonl"
    assert cli.main(["audit", "--n", "1024", "--ops", "30", "--out", str(path)]) == 0
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 5 and all(r["verdict"] == "pass" for r in recs)


def test_cli_trace_dump(tmp_path):
    path = tmp_path / "t.bin"
    assert cli.main(["trace-dump", "--n", "1024", "--ops", "3", "--format", "bin", "--out", str(path)]) == 0
    assert path.stat().st_size > 0
    assert cli.main(["trace-dump", "--n", "1024", "--ops", "3", "--format", "jsonl",
                     "--out", str(tmp_path / "t.jsonl")]) == 0


def test_cli_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n=1024\nB=256\nM=1024\nseed=4\n")
    assert cli.main(["demo-queue", "--config", str(cfg), "--ops", "50", "--out", str(tmp_path / "q")]) == 0
    assert json.loads((tmp_path / "q").read_text())["pass"] is True
