from __future__ import annotations

import csv
import io
import json
import subprocess
import sys

import pytest

from sitsim.cli import CSV_COLUMNS, SCHEMA_VERSION, main, parse_tamper, UsageError
from sitsim.failure import TamperMode
from sitsim.workloads import gen_trace

from conftest import SMALL

COMMON = ["--mem-size", str(SMALL), "--seed", "3"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_run_outputs_are_byte_identical_across_invocations(tmp_path, capsys):
    paths = []
    for i in range(2):
        c, j = tmp_path / f"r{i}.csv", tmp_path / f"r{i}.json"
        code, _, _ = run(capsys, "run", "--gen", "btree:300", *COMMON,
                         "--out", f"csv:{c}", "--out", f"json:{j}")
        assert code == 0
        paths.append((c.read_bytes(), j.read_bytes()))
    assert paths[0] == paths[1]
    rows = list(csv.DictReader(io.StringIO(paths[0][0].decode())))
    assert tuple(rows[0]) == CSV_COLUMNS and rows[0]["schema_version"] == str(SCHEMA_VERSION)
    doc = json.loads(paths[0][1])
    assert doc["config"]["mem_size"] == SMALL and doc["rows"][0]["ops"] == 300


def test_run_from_a_trace_file(tmp_path, capsys):
    p = tmp_path / "t.trace"
    p.write_text(gen_trace("hash", 50, 0, SMALL).dumps())
    code, out, _ = run(capsys, "run", "--trace", str(p), *COMMON)
    assert code == 0 and out.startswith("schema_version,")


def test_config_file_and_flag_override(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text(f"mem_size: {SMALL}\nscheme: eager\nhash_cycles: 120\n")
    code, out, _ = run(capsys, "run", "--config", str(p), "--gen", "hash:40", "--scheme", "lc",
                       "--out", "json:-")
    assert code == 0
    doc = json.loads(out)
    assert doc["config"]["scheme"] == "lc" and doc["config"]["hash_cycles"] == 120


@pytest.mark.parametrize("argv", [
    ["run", "--gen", "nope:10"],
    ["run", "--gen", "hash"],
    ["run", "--gen", "hash:10", "--hash-cycles", "0"],
    ["run", "--trace", "/does/not/exist"],
    ["run", "--gen", "hash:10", "--out", "xml:-"],
    ["run", "--gen", "hash:10", "--tamper", "rollback:leaf=0"],
    ["run", "--gen", "hash:10", "--crash-at", "3", "--tamper", "bogus:leaf=1"],
    ["attack-fuzz", "--gen", "hash:10", "--cases", "0"],
    ["frobnicate"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, _ = run(capsys, *argv, *COMMON)
    assert code == 1


def test_clean_crash_exits_0(capsys):
    code, out, _ = run(capsys, "run", "--gen", "hash:100", "--crash-at", "60", *COMMON)
    assert code == 0 and "Clean" in out


def test_tampered_crash_exits_2(capsys):
    code, out, _ = run(capsys, "run", "--gen", "seqwrite:100", "--crash-at", "150",
                       "--tamper", "rollforward:leaf=0,slot=2", *COMMON)
    assert code == 2 and "AttackDetected(hmac)" in out


def test_replay_tamper_resolves_the_snapshot(capsys):
    code, out, _ = run(capsys, "run", "--gen", "seqwrite:100", "--crash-at", "150",
                       "--tamper", "replay:leaf=0,from=20", *COMMON)
    assert code == 2 and "AttackDetected(root)" in out


def test_lazy_crash_sweep_exits_2(capsys):
    code, out, _ = run(capsys, "crash-sweep", "--gen", "queue:30", "--scheme", "lazy", *COMMON)
    assert code == 2 and "failures=" in out
    code, _, _ = run(capsys, "crash-sweep", "--gen", "queue:30", "--scheme", "scue", *COMMON)
    assert code == 0


def test_attack_fuzz_command(capsys):
    code, out, _ = run(capsys, "attack-fuzz", "--gen", "hash:80", "--cases", "30",
                       "--modes", "rollforward,rollback", *COMMON)
    assert code == 0 and "missed=0" in out


def test_compare_normalizes_to_scue(capsys):
    code, out, _ = run(capsys, "compare", "--gen", "randwrite:300", *COMMON, "--out", "csv:-")
    assert code == 0
    rows = {r["scheme"]: r for r in csv.DictReader(io.StringIO(out))}
    assert set(rows) == {"eager", "lazy", "lc", "scue", "bmt-eager"}
    norm = [c for c in rows["scue"] if c.startswith("norm_")]
    assert norm and all(rows["scue"][c] == "1.0" for c in norm)
    assert float(rows["eager"]["norm_avg_write_latency_cycles"]) > 1.0
    assert rows["eager"]["final_root"] == rows["scue"]["final_root"] == rows["lc"]["final_root"]


@pytest.mark.parametrize("text,mode,target", [
    ("rollforward:leaf=3,slot=5", TamperMode.ROLL_FORWARD, 3),
    ("rollback:leaf=0x10", TamperMode.ROLL_BACK, 16),
    ("random:data_mac=0x40", TamperMode.RANDOM_BYTES, 64),
])
def test_parse_tamper(text, mode, target):
    spec = parse_tamper(text)
    assert spec.mode is mode and spec.target == target


@pytest.mark.parametrize("text", ["rollback:", "replay:leaf=1", "mixed:leaf=1,from=2",
                                  "random:leaf=1", "rollback:leaf", "rollback:leaf=x"])
def test_parse_tamper_rejects(text):
    with pytest.raises(UsageError):
        parse_tamper(text)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sitsim", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "crash-sweep" in proc.stdout
