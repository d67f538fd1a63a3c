"""Command-line front end.

    sitsim run          --gen seqwrite:1000 --scheme scue --out csv:run.csv
    sitsim crash-sweep  --gen array:200 --scheme scue
    sitsim attack-fuzz  --gen array:200 --cases 1000
    sitsim compare      --gen randwrite:10000 --out csv:cmp.csv

Exit codes: 0 success, 1 usage or config error, 2 integrity or consistency failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Dict, List, Optional, Sequence

from .config import SCHEMES, ConfigError, SimConfig, load_config
from .controller import Controller
from .failure import (CrashPoint, TamperMode, TamperSpec, attack_fuzz, capture_states,
                      crash, crash_sweep, recover, tamper)
from .ledger import REPORT_FIELDS
from .metadata import AddressError
from .tree import IntegrityViolation
from .workloads import KINDS, Trace, TraceError, gen_trace, parse_trace

SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema_version",) + REPORT_FIELDS
COMPARE_SCHEMES = ("eager", "lazy", "lc", "scue", "bmt-eager")
NORMALIZED = ("total_cycles", "avg_write_latency_cycles", "avg_read_latency_cycles",
              "hash_count", "tree_node_reads", "stall_cycles")
COMPARE_COLUMNS = CSV_COLUMNS + tuple(f"norm_{c}" for c in NORMALIZED)

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2


class UsageError(Exception):
    pass


# -- argument handling

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON configuration file")
    p.add_argument("--scheme", choices=SCHEMES)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--trace", help="trace file")
    src.add_argument("--gen", help="generated trace as <kind>:<n>, kinds: " + ", ".join(KINDS))
    p.add_argument("--seed", type=int, help="seed for keys, generators and fuzzing")
    p.add_argument("--hash-cycles", type=int)
    p.add_argument("--mem-size", type=int, help="protected memory in bytes")
    p.add_argument("--out", action="append", default=[], metavar="FMT:PATH",
                   help="csv:<path> or json:<path>; '-' as path writes to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitsim", description="SGX integrity tree simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="simulate one trace under one scheme")
    _add_common(run)
    run.add_argument("--crash-at", type=int, help="lose power at this event boundary, then recover")
    run.add_argument("--tamper", help="tamper with the crash image, e.g. rollforward:leaf=3")
    sweep = sub.add_parser("crash-sweep", help="crash and recover at every event boundary")
    _add_common(sweep)
    fuzz = sub.add_parser("attack-fuzz", help="random crash points plus random tampering")
    _add_common(fuzz)
    fuzz.add_argument("--cases", type=int, default=1000)
    fuzz.add_argument("--modes", help="comma-separated subset of: "
                      + ", ".join(m.value for m in TamperMode))
    cmp_ = sub.add_parser("compare", help="run every scheme on the same trace")
    _add_common(cmp_)
    return parser


def make_config(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    changes = {}
    if args.scheme:
        changes["scheme"] = args.scheme
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.hash_cycles is not None:
        changes["hash_cycles"] = args.hash_cycles
    if args.mem_size is not None:
        changes["mem_size"] = args.mem_size
    return cfg.replace(**changes) if changes else cfg


def make_trace(args, cfg: SimConfig) -> Trace:
    if args.trace:
        return parse_trace(args.trace, cfg.seed, cfg.mem_size)
    if not args.gen:
        raise UsageError("one of --trace or --gen is required")
    kind, sep, n = args.gen.partition(":")
    if not sep or not n.isdigit():
        raise UsageError(f"--gen expects <kind>:<n>, got {args.gen!r}")
    return gen_trace(kind, int(n), cfg.seed, cfg.mem_size)


def parse_tamper(text: str) -> TamperSpec:
    """rollforward:leaf=L[,slot=S] | rollback:leaf=L | replay:leaf=L,from=K |
    mixed:leaf=L,leaf2=M,from=K | random:<counter|leaf_mac>=L | random:<data|data_mac>=ADDR

    ``from`` is the earlier event boundary whose persistent state is replayed.
    """
    name, _, rest = text.partition(":")
    try:
        mode = TamperMode(name.lower())
    except ValueError:
        raise UsageError(f"unknown tamper mode {name!r}") from None
    fields: Dict[str, int] = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise UsageError(f"tamper field {item!r} needs key=value")
        try:
            fields[key.strip()] = int(val, 0)
        except ValueError:
            raise UsageError(f"tamper value {val!r} is not an integer") from None
    if mode is TamperMode.RANDOM_BYTES:
        parts = [k for k in fields if k in ("counter", "leaf_mac", "data", "data_mac")]
        if len(parts) != 1:
            raise UsageError("random tamper needs exactly one of counter=, leaf_mac=, data=, data_mac=")
        return TamperSpec(mode, fields[parts[0]], part=parts[0], seed=fields.get("seed", 0))
    if "leaf" not in fields:
        raise UsageError(f"{mode.value} tamper needs leaf=")
    spec = TamperSpec(mode, fields["leaf"], slot=fields.get("slot", 0))
    if mode in (TamperMode.REPLAY, TamperMode.MIXED):
        if "from" not in fields:
            raise UsageError(f"{mode.value} tamper needs from=<event>")
        spec.snapshot = fields["from"]        # resolved to an image by the caller
    if mode is TamperMode.MIXED:
        if "leaf2" not in fields:
            raise UsageError("mixed tamper needs leaf2=")
        spec.target2 = fields["leaf2"]
    return spec


# -- output

def _csv_text(rows: List[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    return buf.getvalue()


def _emit(outs: Sequence[str], rows: List[dict], columns: Sequence[str],
          cfg: SimConfig, extra: Optional[dict] = None) -> None:
    for spec in outs:
        fmt, sep, path = spec.partition(":")
        if not sep or fmt not in ("csv", "json"):
            raise UsageError(f"--out expects csv:<path> or json:<path>, got {spec!r}")
        if fmt == "csv":
            text = _csv_text(rows, columns)
        else:
            doc = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "rows": rows}
            if extra:
                doc.update(extra)
            text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
        if path == "-":
            sys.stdout.write(text)
        else:
            with open(path, "w", newline="") as fh:
                fh.write(text)


def _report_row(ctl: Controller) -> dict:
    row = ctl.report().row()
    row["schema_version"] = SCHEMA_VERSION
    return row


# -- commands

def cmd_run(args) -> int:
    cfg = make_config(args)
    trace = make_trace(args, cfg)
    if args.crash_at is None:
        if args.tamper:
            raise UsageError("--tamper needs --crash-at")
        ctl = Controller(cfg)
        ctl.run(trace.ops)
        row = _report_row(ctl)
        _emit(args.out, [row], CSV_COLUMNS, cfg)
        if not args.out:
            sys.stdout.write(_csv_text([row], CSV_COLUMNS))
        return EXIT_OK
    point = CrashPoint(args.crash_at)
    image, root, ctl = crash(cfg, trace.ops, point)
    if args.tamper:
        spec = parse_tamper(args.tamper)
        if isinstance(spec.snapshot, int):
            states, _ = capture_states(cfg, trace.ops, [spec.snapshot])
            if spec.snapshot not in states:
                raise UsageError(f"event {spec.snapshot} is past the end of the trace")
            spec.snapshot = states[spec.snapshot]
        image = tamper(image, spec)
    verdict = recover(image, root, cfg.osiris_limit)
    extra = {"crash_at": point.event_index, "tamper": args.tamper or "",
             "verdict": verdict.label()}
    row = _report_row(ctl)
    _emit(args.out, [row], CSV_COLUMNS, cfg, extra)
    print(f"crash at event {point.event_index}: {verdict.label()}")
    return EXIT_OK if verdict.clean else EXIT_INTEGRITY


def cmd_crash_sweep(args) -> int:
    cfg = make_config(args)
    trace = make_trace(args, cfg)
    s = crash_sweep(cfg, trace.ops)
    print(f"scheme={s.scheme} points={s.points} clean={s.clean} failures={len(s.failures)}")
    for k, label in s.failures[:20]:
        print(f"  event {k}: {label}")
    rows = [{"schema_version": SCHEMA_VERSION, "scheme": s.scheme, "points": s.points,
             "clean": s.clean, "failures": len(s.failures)}]
    _emit(args.out, rows, ("schema_version", "scheme", "points", "clean", "failures"), cfg,
          {"failures": [[k, label] for k, label in s.failures]})
    return EXIT_OK if s.all_clean else EXIT_INTEGRITY


def cmd_attack_fuzz(args) -> int:
    cfg = make_config(args)
    trace = make_trace(args, cfg)
    if args.cases <= 0:
        raise UsageError("--cases must be positive")
    modes = None
    if args.modes:
        try:
            modes = [TamperMode(m.strip().lower()) for m in args.modes.split(",")]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    s = attack_fuzz(cfg, trace.ops, args.cases, cfg.seed, modes)
    print(f"cases={s.cases} detected={s.detected} missed={s.missed} misclassified={s.misclassified}")
    for mode in sorted(s.by_mode):
        counts = " ".join(f"{k}={v}" for k, v in sorted(s.by_mode[mode].items()))
        print(f"  {mode}: {counts}")
    rows = [{"schema_version": SCHEMA_VERSION, "cases": s.cases, "detected": s.detected,
             "missed": s.missed, "misclassified": s.misclassified}]
    _emit(args.out, rows, ("schema_version", "cases", "detected", "missed", "misclassified"), cfg,
          {"by_mode": s.by_mode})
    return EXIT_OK if s.missed == 0 else EXIT_INTEGRITY


def compare_rows(cfg: SimConfig, trace: Trace) -> List[dict]:
    rows = []
    for scheme in COMPARE_SCHEMES:
        ctl = Controller(cfg.replace(scheme=scheme))
        ctl.run(trace.ops)
        rows.append(_report_row(ctl))
    base = next(r for r in rows if r["scheme"] == "scue")
    for r in rows:
        for c in NORMALIZED:
            num, den = r[c], base[c]
            r[f"norm_{c}"] = 1.0 if num == den else (round(num / den, 6) if den else float("inf"))
    return rows


def cmd_compare(args) -> int:
    cfg = make_config(args)
    trace = make_trace(args, cfg)
    rows = compare_rows(cfg, trace)
    _emit(args.out, rows, COMPARE_COLUMNS, cfg)
    if not args.out:
        sys.stdout.write(_csv_text(rows, COMPARE_COLUMNS))
    roots = {r["final_root"] for r in rows if r["scheme"] in ("eager", "lc", "scue")}
    return EXIT_OK if len(roots) == 1 else EXIT_INTEGRITY


COMMANDS = {"run": cmd_run, "crash-sweep": cmd_crash_sweep,
            "attack-fuzz": cmd_attack_fuzz, "compare": cmd_compare}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, TraceError, AddressError, OSError, ValueError) as exc:
        print(f"sitsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityViolation as exc:
        print(f"sitsim: integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
