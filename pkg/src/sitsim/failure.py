"""Crash injection, tampering, counter recovery and the recovery driver.

Recovery runs in three stages on a crash image:
  1. counter recovery: every stored counter block is authenticated with its
     leaf HMAC, then each minor is advanced (at most ``osiris_limit`` steps)
     until the data MAC of its block verifies; recovered blocks are resealed.
  2. counter-summing reconstruction of the tree, compared with the root.
  3. a sweep over every stored data block with the recovered counters.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .bmt import fold
from .config import SimConfig
from .controller import Controller, PowerFailure
from .crypto import Crypto
from .macs import data_mac, leaf_hmac
from .metadata import BLOCK, BLOCKS_PER_LEAF, LEAF_SPAN, CounterBlock, RootRegister
from .nvm import KIND_BMT, NvmImage
from .tree import ROLL_BACK, ROLL_FORWARD, ReconstructionReport, reconstruct

CLEAN = "Clean"
ATTACK = "AttackDetected"
UNRECOVERABLE = "UnrecoverableCounter"


class UnrecoverableCounter(Exception):
    def __init__(self, addr: int):
        super().__init__(f"no counter within the recovery limit matches block {addr:#x}")
        self.addr = addr


@dataclass(frozen=True)
class CrashPoint:
    event_index: int

    def __post_init__(self):
        if self.event_index < 0:
            raise ValueError("crash point must be non-negative")


class TamperMode(Enum):
    ROLL_FORWARD = "rollforward"
    ROLL_BACK = "rollback"
    REPLAY = "replay"
    RANDOM_BYTES = "random"
    MIXED = "mixed"


@dataclass
class TamperSpec:
    """What the attacker changes in NVM.

    target is a leaf index, except for RANDOM_BYTES where ``part`` picks the
    field: "counter" or "leaf_mac" (target = leaf), "data" or "data_mac"
    (target = byte address). MIXED rolls ``target`` forward and replays
    ``target2``. REPLAY and MIXED need ``snapshot``, an earlier crash image.
    """
    mode: TamperMode
    target: int
    part: str = "counter"
    target2: Optional[int] = None
    snapshot: Optional[NvmImage] = None
    slot: int = 0
    seed: int = 0


def tamper(image: NvmImage, spec: TamperSpec) -> NvmImage:
    img = image.copy()
    mode = spec.mode
    if mode is TamperMode.ROLL_FORWARD:
        _roll_forward(img, spec.target, spec.slot)
    elif mode is TamperMode.ROLL_BACK:
        # the region goes back to its boot-time tuple: counter, HMAC and data all consistent
        img.restore_region(spec.target, {"counter": None, "leaf_mac": None, "data": {}})
    elif mode is TamperMode.REPLAY:
        _replay(img, spec.target, spec.snapshot)
    elif mode is TamperMode.MIXED:
        _roll_forward(img, spec.target, spec.slot)
        _replay(img, spec.target2, spec.snapshot)
    elif mode is TamperMode.RANDOM_BYTES:
        rng = random.Random(spec.seed)
        if spec.part == "counter":
            blk, _ = img.read_counter(spec.target)
            raw = bytearray(blk.encode())
            raw[rng.randrange(len(raw))] ^= rng.randrange(1, 256)
            mac = img.leaf_macs.get(spec.target, img.pristine_leaf_mac(spec.target))
            img.counters[spec.target] = CounterBlock.decode(bytes(raw), img.minor_bits)
            img.leaf_macs[spec.target] = mac
        elif spec.part == "leaf_mac":
            _, mac = img.read_counter(spec.target)
            img.leaf_macs[spec.target] = mac ^ rng.randrange(1, 1 << 64)
            img.counters.setdefault(spec.target, CounterBlock(minor_bits=img.minor_bits))
        elif spec.part == "data":
            ct, mac = img.read_data(spec.target)
            raw = bytearray(ct)
            raw[rng.randrange(BLOCK)] ^= rng.randrange(1, 256)
            img.write_data(spec.target, bytes(raw), mac)
        elif spec.part == "data_mac":
            ct, mac = img.read_data(spec.target)
            img.write_data(spec.target, ct, mac ^ rng.randrange(1, 1 << 64))
        else:
            raise ValueError(f"unknown tamper field {spec.part!r}")
    else:
        raise ValueError(f"unknown tamper mode {mode!r}")
    return img


def _roll_forward(img: NvmImage, leaf: int, slot: int) -> None:
    blk, mac = img.read_counter(leaf)
    if blk.minors[slot] + 1 < (1 << blk.minor_bits):
        blk.minors[slot] += 1
    else:
        blk.major += 1
    img.counters[leaf] = blk
    img.leaf_macs[leaf] = mac


def _replay(img: NvmImage, leaf: int, snapshot: Optional[NvmImage]) -> None:
    if snapshot is None:
        raise ValueError("replay needs an earlier snapshot")
    img.restore_region(leaf, snapshot.stored_region(leaf))


# --------------------------------------------------------------------------
# counter recovery

@dataclass
class CounterRecovery:
    blocks: Dict[int, CounterBlock] = field(default_factory=dict)
    increments: int = 0
    auth_failures: List[int] = field(default_factory=list)
    unrecoverable: List[int] = field(default_factory=list)   # data block addresses


def _leaves_to_scan(image: NvmImage, dense: bool):
    return range(image.geo.leaf_count) if dense else sorted(image.touched_leaves())


def recover_counters(image: NvmImage, limit: int = 4, dense: bool = False,
                     strict: bool = True) -> CounterRecovery:
    """Advance stale counters until each stored data block's MAC verifies.

    Recovered blocks are written back into ``image`` together with a fresh
    leaf HMAC. Blocks that fail authentication are left untouched and listed;
    the reconstruction will flag them. With ``strict`` the first block that
    cannot be recovered raises UnrecoverableCounter.
    """
    crypto = image.crypto
    geo = image.geo
    sit = image.kind != KIND_BMT
    wrap = 1 << image.minor_bits
    out = CounterRecovery()
    for leaf in _leaves_to_scan(image, dense):
        blk, lmac = image.read_counter(leaf)
        laddr = geo.node_addr(0, leaf)
        if sit and leaf_hmac(crypto, laddr, blk, blk.leaf_sum()) != lmac:
            out.auth_failures.append(leaf)
            continue
        found = []
        bad = False
        base = leaf * LEAF_SPAN
        for j in range(BLOCKS_PER_LEAF):
            a = base + j * BLOCK
            stored = blk.minors[j]
            if blk.major == 0 and stored == 0 and a not in image.data and a not in image.data_macs:
                found.append((0, 0))        # boot-formatted pair, nothing to check
                continue
            ct, dmac = image.read_data(a)
            hit = None
            for inc in range(limit + 1):
                v = stored + inc
                major, minor = (blk.major, v) if v < wrap else (blk.major + 1, v - wrap)
                if major >> 64:
                    break
                if data_mac(crypto, a, ct, major, minor) == dmac:
                    hit = (major, minor)
                    break
            if hit is None:
                if strict:
                    raise UnrecoverableCounter(a)
                out.unrecoverable.append(a)
                bad = True
                continue
            found.append(hit)
        if bad:
            continue
        majors = {m for m, _ in found}
        if len(majors) != 1:
            # part of the region moved to a new major and part did not
            if strict:
                raise UnrecoverableCounter(base)
            out.unrecoverable.append(base)
            continue
        new = CounterBlock(majors.pop(), [mn for _, mn in found], image.minor_bits)
        inc = new.leaf_sum() - blk.leaf_sum()
        if new != blk:
            out.increments += inc
            mac = leaf_hmac(crypto, laddr, new, new.leaf_sum()) if sit else 0
            image.write_counter(leaf, new, mac)
        out.blocks[leaf] = new
    return out


# --------------------------------------------------------------------------
# the recovery driver

@dataclass
class RecoveryVerdict:
    status: str                        # Clean | AttackDetected | UnrecoverableCounter
    kind: Optional[str] = None         # for attacks: "hmac" | "root" | "data"
    report: Optional[ReconstructionReport] = None
    counters: Optional[CounterRecovery] = None
    image: Optional[NvmImage] = None   # recovered image (rebuilt tree installed when Clean)
    data_failures: List[int] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return self.status == CLEAN

    def label(self) -> str:
        return self.status if self.kind is None else f"{self.status}({self.kind})"


def recover(image: NvmImage, root: Optional[RootRegister] = None, limit: int = 4,
            dense: bool = False) -> RecoveryVerdict:
    img = image.copy()
    if root is not None:
        img.root = root.copy()
    cr = recover_counters(img, limit, dense, strict=False)
    if img.kind == KIND_BMT:
        rebuilt, nodes = fold(img.crypto, img.geo, cr.blocks, img.minor_bits)
        match = rebuilt == list(img.root.counters)
        rep = ReconstructionReport(match, [], "Clean" if match else ROLL_BACK, rebuilt, nodes)
    else:
        rep = reconstruct(img, img.root, img.crypto, dense)
    # data sweep over every stored block with the recovered counters
    skip = set(cr.auth_failures)
    bad_addrs = set(cr.unrecoverable)
    data_failures = []
    for a in sorted(set(img.data) | set(img.data_macs)):
        leaf = a // LEAF_SPAN
        if leaf in skip or a in bad_addrs or leaf * LEAF_SPAN in bad_addrs:
            continue
        blk = cr.blocks.get(leaf)
        if blk is None:
            blk, _ = img.read_counter(leaf)
        j = (a // BLOCK) % BLOCKS_PER_LEAF
        ct, mac = img.read_data(a)
        if data_mac(img.crypto, a, ct, blk.major, blk.minors[j]) != mac:
            data_failures.append(a)
    if rep.hmac_failures:
        verdict = RecoveryVerdict(ATTACK, "hmac")
    elif cr.unrecoverable:
        verdict = RecoveryVerdict(UNRECOVERABLE)
    elif not rep.root_match:
        verdict = RecoveryVerdict(ATTACK, "root")
    elif data_failures:
        verdict = RecoveryVerdict(ATTACK, "data")
    else:
        verdict = RecoveryVerdict(CLEAN)
        img.nodes = dict(rep.nodes)
    verdict.report = rep
    verdict.counters = cr
    verdict.image = img
    verdict.data_failures = data_failures
    return verdict


# --------------------------------------------------------------------------
# harnesses

def crash(cfg: SimConfig, ops, at: CrashPoint | int, crypto: Optional[Crypto] = None,
          image: Optional[NvmImage] = None) -> Tuple[NvmImage, RootRegister, Controller]:
    """Run ``ops`` and lose power at event boundary ``at``.

    Returns the drained image, its root register and the halted controller
    (whose cache still shows the volatile state that was lost).
    """
    at = at.event_index if isinstance(at, CrashPoint) else at
    ctl = Controller(cfg, crypto, image)
    cache = None
    try:
        ctl.run(ops, crash_at=at)
    except PowerFailure:
        pass
    cache = ctl.cache
    img = ctl.drain_on_crash()
    ctl.cache = cache
    return img, img.root.copy(), ctl


def capture_states(cfg: SimConfig, ops, points: Optional[Sequence[int]] = None,
                   crypto: Optional[Crypto] = None) -> Tuple[Dict[int, NvmImage], Controller]:
    """Persistent images at every event boundary (or only at ``points``) in one run."""
    wanted = None if points is None else set(points)
    states: Dict[int, NvmImage] = {}

    def observe(k: int, ctl: Controller) -> None:
        if wanted is None or k in wanted:
            states[k] = ctl.persistent_state()

    ctl = Controller(cfg, crypto)
    ctl.run(ops, observer=observe)
    return states, ctl


@dataclass
class SweepSummary:
    scheme: str
    points: int
    clean: int
    failures: List[Tuple[int, str]] = field(default_factory=list)

    @property
    def all_clean(self) -> bool:
        return self.clean == self.points


MAX_SWEEP_EVENTS = 10_000


def crash_sweep(cfg: SimConfig, ops, crypto: Optional[Crypto] = None) -> SweepSummary:
    """Crash and recover at every event boundary of the trace."""
    ops = list(ops)
    states, ctl = capture_states(cfg, ops, crypto=crypto)
    if ctl.events > MAX_SWEEP_EVENTS:
        raise ValueError(f"trace has {ctl.events} events; exhaustive sweeps are capped at "
                         f"{MAX_SWEEP_EVENTS}")
    summary = SweepSummary(cfg.scheme, len(states), 0)
    for k in sorted(states):
        v = recover(states[k], limit=cfg.osiris_limit)
        if v.clean:
            summary.clean += 1
        else:
            summary.failures.append((k, v.label()))
    return summary


EXPECTED_CLASS = {
    TamperMode.ROLL_FORWARD: "hmac",
    TamperMode.ROLL_BACK: "root",
    TamperMode.REPLAY: "root",
    TamperMode.MIXED: "hmac",
}


@dataclass
class FuzzSummary:
    cases: int = 0
    detected: int = 0
    missed: int = 0
    misclassified: int = 0
    by_mode: Dict[str, Dict[str, int]] = field(default_factory=dict)
    missed_cases: List[str] = field(default_factory=list)

    def record(self, mode: TamperMode, verdict: RecoveryVerdict, note: str) -> None:
        self.cases += 1
        cls = verdict.kind if verdict.status == ATTACK else (
            "osiris" if verdict.status == UNRECOVERABLE else "none")
        self.by_mode.setdefault(mode.value, {})
        self.by_mode[mode.value][cls] = self.by_mode[mode.value].get(cls, 0) + 1
        if verdict.clean:
            self.missed += 1
            self.missed_cases.append(note)
        else:
            self.detected += 1
            want = EXPECTED_CLASS.get(mode)
            if want is not None and cls != want:
                self.misclassified += 1


def _written_leaves(img: NvmImage) -> List[int]:
    return sorted({a // LEAF_SPAN for a in img.data})


def _recovered_sum(img: NvmImage, leaf: int, limit: int) -> Optional[int]:
    probe = NvmImage(img.crypto, img.geo, img.minor_bits, img.kind)
    probe.restore_region(leaf, img.stored_region(leaf))
    try:
        cr = recover_counters(probe, limit)
    except UnrecoverableCounter:
        return None
    blk = cr.blocks.get(leaf)
    return None if blk is None else blk.leaf_sum()


def attack_fuzz(cfg: SimConfig, ops, n_cases: int, seed: int = 0,
                modes: Optional[Sequence[TamperMode]] = None,
                crypto: Optional[Crypto] = None) -> FuzzSummary:
    """Random crash point plus one random tamper per case; every case must be detected."""
    if n_cases <= 0:
        raise ValueError("n_cases must be positive")
    ops = list(ops)
    modes = list(modes or TamperMode)
    rng = random.Random(f"fuzz:{seed}")
    states, ctl = capture_states(cfg, ops, crypto=crypto)
    points = [k for k in sorted(states) if _written_leaves(states[k])]
    if not points:
        raise ValueError("trace never persists a write; nothing to tamper with")
    summary = FuzzSummary()
    limit = cfg.osiris_limit
    sums: Dict[Tuple[int, int], Optional[int]] = {}

    def leaf_sum_at(k: int, leaf: int):
        if (k, leaf) not in sums:
            sums[(k, leaf)] = _recovered_sum(states[k], leaf, limit)
        return sums[(k, leaf)]

    def replay_source(k: int, leaf: int):
        now = leaf_sum_at(k, leaf)
        earlier = [j for j in sorted(states) if j < k]
        rng.shuffle(earlier)
        for j in earlier[:32]:
            s = leaf_sum_at(j, leaf)
            if s is not None and s != now:
                return states[j]
        return None

    attempts = 0
    while summary.cases < n_cases:
        attempts += 1
        if attempts > 50 * n_cases:
            raise RuntimeError("could not build enough tamper cases from this trace")
        k = rng.choice(points)
        img = states[k]
        leaves = _written_leaves(img)
        mode = rng.choice(modes)
        leaf = rng.choice(leaves)
        slot = rng.randrange(BLOCKS_PER_LEAF)
        spec = TamperSpec(mode, leaf, slot=slot, seed=rng.randrange(1 << 30))
        if mode is TamperMode.REPLAY:
            spec.snapshot = replay_source(k, leaf)
            if spec.snapshot is None:
                continue
        elif mode is TamperMode.MIXED:
            other = [x for x in leaves if x != leaf]
            if not other:
                continue
            spec.target2 = rng.choice(other)
            spec.snapshot = replay_source(k, spec.target2)
            if spec.snapshot is None:
                continue
        elif mode is TamperMode.RANDOM_BYTES:
            spec.part = rng.choice(("counter", "leaf_mac", "data", "data_mac"))
            if spec.part in ("data", "data_mac"):
                spec.target = rng.choice([a for a in img.data if a // LEAF_SPAN == leaf])
            if img.kind == KIND_BMT and spec.part == "leaf_mac":
                spec.part = "counter"
        verdict = recover(tamper(img, spec), limit=limit)
        summary.record(mode, verdict, f"point={k} mode={mode.value} target={spec.target}")
    return summary
