"""Acceptance checks. Each test prints one PASS/FAIL line for its criterion."""
from __future__ import annotations

import time

import pytest

from sitsim.config import SimConfig
from sitsim.controller import Controller
from sitsim.failure import (ATTACK, CLEAN, UNRECOVERABLE, TamperMode, TamperSpec,
                            UnrecoverableCounter, attack_fuzz, capture_states, crash,
                            crash_sweep, recover, recover_counters, tamper)
from sitsim.metadata import BLOCK, BLOCKS_PER_LEAF, LEAF_SPAN
from sitsim.tree import reconstruct
from sitsim.workloads import KINDS, WORKLOAD_KINDS, gen_trace
from sitsim.wqueue import interleavings, naive_tags, preupdate_tags

from conftest import SMALL, writes


@pytest.fixture
def verdict(capsys, request):
    """Call with (ok, detail); prints the criterion line, then asserts."""
    def report(ok: bool, detail: str) -> None:
        name = request.node.name.replace("test_", "", 1)
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return report


def mixed_trace(n: int, seed: int, mem: int):
    """Round-robin slices of every workload kind."""
    per = -(-n // len(WORKLOAD_KINDS))
    parts = [gen_trace(k, per, seed, mem).ops for k in WORKLOAD_KINDS]
    ops = []
    for i in range(per):
        ops.extend(p[i] for p in parts)
    return ops[:n]


def test_c01_scheme_equivalence(verdict):
    start = time.perf_counter()
    mismatches = 0
    for t in range(100):
        ops = gen_trace(KINDS[t % len(KINDS)], 10_000, t, SMALL).ops
        roots = []
        for scheme in ("scue", "lc", "eager"):
            ctl = Controller(SimConfig(mem_size=SMALL, cache_kib=16, scheme=scheme,
                                       check_otp_unique=False))
            ctl.run(ops)
            roots.append(tuple(ctl.root))
        mismatches += len(set(roots)) != 1
    elapsed = time.perf_counter() - start
    verdict(mismatches == 0 and elapsed < 120,
            f"{100 - mismatches}/100 traces agree, {elapsed:.1f}s (limit 120s)")


def test_c02_closed_form_critical_path(verdict):
    addr = 0x1234_5000
    scue = Controller(SimConfig(scheme="scue"))
    scue.write(addr, bytes(64))
    eager = Controller(SimConfig(scheme="eager", eager_parallel_hashes=1))
    eager.write(addr, bytes(64))
    cfg = eager.cfg
    s, e = scue.ledger, eager.ledger
    n = eager.geo.top + 1                            # SIT nodes on the branch plus the counter block
    h, r, p = cfg.hash_cycles, cfg.nvm_read_cycles, cfg.otp_cycles
    scue_form = r + p + h                            # counter fetch, pad, data MAC
    eager_form = n * r + n * h + p + h + n * h       # fetch+verify branch, pad, data MAC, rehash branch
    checks = {
        "scue hash cycles == 80": s.cycles_of("hash.") == 80,
        "scue tree reads == 0": s.count("read.tree") == 0,
        "scue ledger == closed form": s.ops == [("write", scue_form)],
        "eager serial update hashes >= 8x80": e.cycles_of("hash.update") >= 8 * 80,
        "eager tree reads == 8": e.count("read.tree") == 8,
        "eager ledger == closed form": e.ops == [("write", eager_form)],
    }
    bad = [k for k, ok in checks.items() if not ok]
    verdict(not bad, f"scue={s.ops[0][1]} cycles, eager={e.ops[0][1]} cycles"
            + (f"; failed: {bad}" if bad else ""))


def test_c03_directional_latency(verdict):
    ops = gen_trace("randwrite", 10_000, 0).ops
    lat = {}
    for scheme in ("eager", "lazy", "scue"):
        ctl = Controller(SimConfig(scheme=scheme, check_otp_unique=False))
        ctl.run(ops)
        lat[scheme] = ctl.report().avg_write_latency_cycles
    e, l = lat["eager"] / lat["scue"], lat["lazy"] / lat["scue"]
    verdict(e >= 1.5 and l >= 1.05, f"eager/scue={e:.3f} (>=1.5), lazy/scue={l:.3f} (>=1.05)")


def test_c04_hash_sensitivity(verdict):
    ratios = {}
    for kind in WORKLOAD_KINDS:
        ops = gen_trace(kind, 10_000, 0).ops
        lat = []
        for hc in (80, 160):
            ctl = Controller(SimConfig(scheme="scue", hash_cycles=hc, check_otp_unique=False))
            ctl.run(ops)
            lat.append(ctl.report().avg_write_latency_cycles)
        ratios[kind] = lat[1] / lat[0]
    ok = all(1.0 <= v <= 1.25 for v in ratios.values())
    verdict(ok, ", ".join(f"{k}={v:.3f}" for k, v in ratios.items()) + " (in [1.0, 1.25])")


def test_c05_root_crash_consistency(verdict):
    ops = mixed_trace(200, 0, SMALL)
    start = time.perf_counter()
    parts, ok = [], True
    for scheme in ("eager", "lazy", "lc", "scue"):
        s = crash_sweep(SimConfig(mem_size=SMALL, cache_kib=4, scheme=scheme), ops)
        ok &= s.all_clean
        parts.append(f"{scheme} {s.clean}/{s.points} clean")
    elapsed = time.perf_counter() - start
    verdict(ok and elapsed < 300, ", ".join(parts) + f", {elapsed:.1f}s")


def test_c06_attack_detection(verdict):
    ops = mixed_trace(200, 1, SMALL)
    s = attack_fuzz(SimConfig(mem_size=SMALL, cache_kib=4, scheme="scue"), ops, 1000, seed=0)
    by_mode = "; ".join(f"{m}: {c}" for m, c in sorted(s.by_mode.items()))
    verdict(s.cases == 1000 and s.detected == 1000 and s.misclassified == 0,
            f"{s.detected}/{s.cases} detected, {s.misclassified} misclassified [{by_mode}]")


def test_c07_reconstruction_soundness(verdict):
    ops = mixed_trace(200, 2, SMALL)
    clean = bad_clean = tampered = missed = 0
    for scheme in ("eager", "lc", "scue"):
        cfg = SimConfig(mem_size=SMALL, cache_kib=4, scheme=scheme)
        states, _ = capture_states(cfg, ops)
        for k, img in states.items():
            work = img.copy()
            recover_counters(work, cfg.osiris_limit)
            rep = reconstruct(work, work.root, work.crypto)
            clean += 1
            bad_clean += not (rep.root_match and not rep.hmac_failures)
            if k % 7:
                continue
            for leaf in sorted({a // LEAF_SPAN for a in img.data}):
                specs = [TamperSpec(TamperMode.ROLL_FORWARD, leaf, slot=leaf % BLOCKS_PER_LEAF),
                         TamperSpec(TamperMode.ROLL_BACK, leaf),
                         TamperSpec(TamperMode.RANDOM_BYTES, leaf, part="counter", seed=k),
                         TamperSpec(TamperMode.RANDOM_BYTES, leaf, part="leaf_mac", seed=k)]
                for spec in specs:
                    tampered += 1
                    missed += recover(tamper(img, spec), limit=cfg.osiris_limit).clean
    verdict(bad_clean == 0 and missed == 0,
            f"{clean - bad_clean}/{clean} clean images reconstruct, "
            f"{tampered - missed}/{tampered} leaf tampers flagged")


def test_c08_preupdate_regression(verdict):
    schedules = list(interleavings((2, 1, 1), 2))
    wrong = 0
    naive_dup = 0
    for sch in schedules:
        tags = preupdate_tags(sch, 3)
        wrong += [t for t, _ in tags] != [1, 2, 3, 4] or any(t != r for t, r in tags)
        nt = [t for t, _ in naive_tags(sch, 3)]
        naive_dup += len(set(nt)) != len(nt)
    verdict(wrong == 0 and naive_dup >= 1,
            f"{len(schedules)} interleavings: pre-update wrong in {wrong}, "
            f"naive duplicates in {naive_dup}")


def test_c09_overflow_path(verdict):
    cfg = SimConfig(mem_size=SMALL, cache_kib=4)
    leaf = 5
    base = leaf * LEAF_SPAN
    fill = writes([base + j * BLOCK for j in range(BLOCKS_PER_LEAF)], seed=1)
    hammer = writes([base + 3 * BLOCK] * 130, seed=2)   # slot 3 sees 131 writes; the 128th wraps
    ops = fill + hammer
    ctl = Controller(cfg)
    ctl.run(ops)
    truth = {op.addr: op.payload for op in ops}
    blk = ctl.cache.peek((0, leaf)).obj
    readback = all(ctl.read(a) == d for a, d in truth.items())
    resealed = ctl.queue.user_writes >= len(ops) + BLOCKS_PER_LEAF - 1
    image = ctl.shutdown()
    v = recover(image, limit=cfg.osiris_limit)
    mid = crash(cfg, ops, len(fill) + 129)
    v_mid = recover(mid[0], mid[1], cfg.osiris_limit)
    ok = (ctl.overflows == 1 and blk.major == 1 and blk.minors[3] == 131 - 128
          and all(m == 0 for j, m in enumerate(blk.minors) if j != 3)
          and resealed and readback and v.clean and v_mid.clean)
    verdict(ok, f"overflows={ctl.overflows}, major={blk.major}, minor[3]={blk.minors[3]}, "
            f"read-back={'ok' if readback else 'bad'}, recovery={v.label()}/{v_mid.label()}")


def test_c10_osiris_recovery(verdict):
    limit = SimConfig().osiris_limit
    within = beyond = 0
    for stale in range(0, limit + 4):
        cfg = SimConfig(mem_size=SMALL, cache_kib=256, osiris_stop_loss=False)
        addrs = [128 + 64 * (i % 2) for i in range(2 * stale)]
        ops = writes(addrs)
        image, root, ctl = crash(cfg, ops, 10 ** 6)
        truth = ctl.cache.peek((0, 0)).obj if ops else image.read_counter(0)[0]
        if stale <= limit:
            cr = recover_counters(image.copy(), limit)
            v = recover(image, root, limit)
            within += v.clean and (not ops or cr.blocks[0] == truth)
        else:
            try:
                recover_counters(image.copy(), limit)
                raised = False
            except UnrecoverableCounter:
                raised = True
            v = recover(image, root, limit)
            beyond += raised and v.status == UNRECOVERABLE
    verdict(within == limit + 1 and beyond == 3,
            f"exact recovery {within}/{limit + 1} within limit, "
            f"UnrecoverableCounter {beyond}/3 beyond")
