"""SGX integrity tree: update schemes, verification, eviction and reconstruction.

Cache keys are (level, index): level 0 is the counter block of leaf ``index``,
levels 1..top are SIT nodes. The root is the controller's working root list.

Schemes
  eager  fetch and verify the whole branch, bump every counter up to the root,
         recompute every HMAC on the write path.
  lc     same counter bumps, but HMACs are left stale until eviction.
  lazy   bump only the parent counter; a dirty node bumps its own parent by
         one when it is evicted. The root never changes.
  scue   bump the root only; the branch is brought up to date by a background
         job. Evicted nodes are tagged using the sum of their own counters.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from .cache import CacheEntry
from .crypto import Crypto
from .macs import compute_node_hmac, leaf_hmac, sit_hmac
from .metadata import FANOUT, SIT_COUNTER_BITS, CounterBlock, RootRegister, SitNode, dummy_counter

__all__ = [
    "IntegrityViolation", "BranchUpdateJob", "ReconstructionReport", "SitTree",
    "compute_node_hmac", "reconstruct",
]

CLEAN = "Clean"
ROLL_FORWARD = "RollForwardDetected"
ROLL_BACK = "RollBackDetected"


class IntegrityViolation(Exception):
    def __init__(self, level: int, index: int, what: str = "HMAC mismatch"):
        self.level = level
        self.index = index
        name = "data" if level < 0 else ("counter block" if level == 0 else f"level {level}")
        super().__init__(f"{what} at {name} index {index}")


@dataclass
class BranchUpdateJob:
    leaf: int
    delta: int
    enqueue_cycle: int
    snapshot: Optional[Tuple[CounterBlock, int]] = None   # unverified fetched copy
    done: bool = False


class SitTree:
    def __init__(self, ctl):
        self.ctl = ctl
        self.cfg = ctl.cfg
        self.geo = ctl.geo
        self.crypto: Crypto = ctl.crypto
        self.cache = ctl.cache
        self.ledger = ctl.ledger
        self.scheme = ctl.cfg.scheme
        self.top = self.geo.top
        self.jobs: Deque[BranchUpdateJob] = deque()
        self.octant_jobs: List[Deque[BranchUpdateJob]] = [deque() for _ in range(FANOUT)]
        self.pending_delta = [0] * FANOUT
        self.forced_jobs = 0
        self.dummy_checks = 0
        self.dummy_mismatches = 0
        self._in_job = False
        # per level: (shift to the parent index, mask for the slot inside the parent)
        shifts = self.geo.shifts
        self._up = [(shifts[lvl + 1] - shifts[lvl], (1 << (shifts[lvl + 1] - shifts[lvl])) - 1)
                    for lvl in range(self.top + 1)]
        self._branches: Dict[int, List[Tuple[int, int]]] = {}
        self.update = getattr(self, "_update_" + self.scheme)

    # -- geometry helpers

    def parent_of(self, level: int, index: int) -> Tuple[int, int, int]:
        """(parent level, parent index, slot); parent level top+1 means the root, slot = octant."""
        sh, mask = self._up[level]
        return level + 1, index >> sh, index & mask

    def octant(self, level: int, index: int) -> int:
        return self.geo.octant_of_node(level, index)

    def branch_keys(self, leaf: int) -> List[Tuple[int, int]]:
        """(level, index) of every SIT node above ``leaf``, bottom-up."""
        keys = self._branches.get(leaf)
        if keys is None:
            keys = []
            idx = leaf
            for lvl in range(1, self.top + 1):
                idx >>= self._up[lvl - 1][0]
                keys.append((lvl, idx))
            self._branches[leaf] = keys
        return keys

    def settled(self, octant: int) -> bool:
        return not self.octant_jobs[octant]

    def parent_counter(self, level: int, index: int) -> Optional[int]:
        """Counter guarding (level, index) as currently applied, or None if the parent is not cached."""
        plvl, pidx, slot = self.parent_of(level, index)
        if plvl > self.top:
            return self.ctl.root[slot] - self.pending_delta[slot]
        e = self.cache.peek((plvl, pidx))
        return None if e is None else e.obj.counters[slot]

    # -- verification

    def verify_chain(self, level: int, index: int) -> CacheEntry:
        """Bring (level, index) into the cache, fetching and verifying missing ancestors top-down."""
        if self.scheme == "scue" and not self._in_job:
            self.settle(self.octant(level, index))
        cache = self.cache
        missing = []
        lvl, idx = level, index
        while lvl <= self.top:
            e = cache.access((lvl, idx))
            if e is not None:
                cache.pin(e.key)
                break
            missing.append((lvl, idx))
            lvl, idx, _ = self.parent_of(lvl, idx)
        cfg = self.cfg
        for lvl, idx in reversed(missing):
            if cache.peek((lvl, idx)) is not None:
                # brought in meanwhile by a write-back that needed its parent
                cache.pin((lvl, idx))
                continue
            addr = self.geo.node_addr(lvl, idx)
            pc = self.parent_counter(lvl, idx)
            if lvl == 0:
                blk, mac = self.ctl.nvm_counter(idx)
                self.ledger.charge("read.tree.counter", cfg.nvm_read_cycles)
                expect = leaf_hmac(self.crypto, addr, blk, pc)
                entry = CacheEntry((0, idx), addr, blk, mac=mac)
                entry.persisted = list(blk.minors)
            else:
                node = self.ctl.nvm_node(lvl, idx)
                self.ledger.charge("read.tree", cfg.nvm_read_cycles)
                expect = sit_hmac(self.crypto, addr, node, pc)
                mac = node.hmac
                entry = CacheEntry((lvl, idx), addr, node)
            self.ledger.charge("hash.verify", cfg.hash_cycles)
            if expect != mac:
                raise IntegrityViolation(lvl, idx)
            self.ctl.cache_insert(entry, pin=True)
        return cache.peek((level, index))

    def ensure_branch(self, leaf: int) -> None:
        """Every SIT node above ``leaf`` cached and pinned, fetching top-down."""
        cache = self.cache
        pinned = cache.pinned
        for key in reversed(self.branch_keys(leaf)):
            if cache.access(key) is None:
                self.verify_chain(*key)
            else:
                pinned.add(key)

    def acquire_counter(self, leaf: int) -> CacheEntry:
        """Counter block for a write that missed in the cache."""
        if self.scheme != "scue":
            return self.verify_chain(0, leaf)
        # fetched without touching the tree; the branch job verifies it later
        blk, mac = self.ctl.nvm_counter(leaf)
        self.ledger.charge("read.counter", self.cfg.nvm_read_cycles)
        e = CacheEntry((0, leaf), self.geo.node_addr(0, leaf), blk, verified=False, mac=mac)
        e.persisted = list(blk.minors)
        e.job = (blk.copy(), mac)
        self.ctl.cache_insert(e, pin=True)
        return e

    def prepare_read(self, leaf: int, entry: Optional[CacheEntry]) -> CacheEntry:
        """Verified counter block for a read."""
        if entry is None:
            return self.verify_chain(0, leaf)
        # cached but its fetched copy is still waiting for its branch job
        self.settle(self.octant(0, leaf))
        return entry

    # -- write-path updates

    def update(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        """Apply one write's counter delta under the configured scheme (bound in __init__)."""
        raise NotImplementedError

    def _bump_branch(self, leaf: int, delta: int, stale: bool) -> List[CacheEntry]:
        """Add ``delta`` to the slot guarding ``leaf``'s path in every cached branch node."""
        entries = []
        index = self.cache.index
        child = leaf
        for lvl, key in enumerate(self.branch_keys(leaf)):
            e = index[key]
            e.obj.counters[child & self._up[lvl][1]] += delta
            e.dirty = True
            e.stale = stale
            entries.append(e)
            child = key[1]
        return entries

    def _update_eager(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        self.ensure_branch(leaf)
        nodes = self._bump_branch(leaf, delta, stale=False)
        o = self.octant(0, leaf)
        self.ctl.root[o] += delta
        # parent counters top-down: root slot, then the slot each node occupies in its parent
        pc = self.ctl.root[o]
        for lvl in range(len(nodes) - 1, -1, -1):
            e = nodes[lvl]
            e.obj.hmac = sit_hmac(self.crypto, e.addr, e.obj, pc)
            pc = e.obj.counters[(nodes[lvl - 1].key[1] if lvl else leaf) & self._up[lvl][1]]
        entry.mac = leaf_hmac(self.crypto, entry.addr, entry.obj, pc)
        entry.stale = False
        n = len(nodes) + 1
        p = self.cfg.eager_parallel_hashes
        self.ledger.charge("hash.update", -(-n // p) * self.cfg.hash_cycles, n=n)

    def _update_lc(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        self.ensure_branch(leaf)
        self._bump_branch(leaf, delta, stale=True)
        self.ctl.root[self.octant(0, leaf)] += delta
        entry.stale = True

    def _update_lazy(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        sh, mask = self._up[0]
        parent = self.verify_chain(1, leaf >> sh)
        parent.obj.counters[leaf & mask] += delta
        parent.dirty = True
        parent.stale = True
        entry.mac = leaf_hmac(self.crypto, entry.addr, entry.obj, parent.obj.counters[leaf & mask])
        entry.stale = False
        self.ledger.charge("hash.update", self.cfg.hash_cycles)

    def _update_scue(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        o = self.octant(0, leaf)
        self.ctl.root[o] += delta
        self.pending_delta[o] += delta
        snapshot = entry.job if isinstance(entry.job, tuple) else None
        job = BranchUpdateJob(leaf, delta, self.ctl.time(), snapshot)
        if snapshot is not None:
            entry.job = job
        self.jobs.append(job)
        self.octant_jobs[o].append(job)
        entry.stale = True

    # -- background branch updates

    def has_jobs(self) -> bool:
        return any(self.octant_jobs)

    def run_next_job(self) -> None:
        while self.jobs:
            job = self.jobs.popleft()
            if not job.done:
                self.octant_jobs[self.octant(0, job.leaf)].popleft()
                self._run_job(job)
                return

    def settle(self, octant: int) -> None:
        """Force every pending job of ``octant`` to complete, charged to the caller."""
        q = self.octant_jobs[octant]
        while q:
            job = q.popleft()
            self.forced_jobs += 1
            self._run_job(job)

    def _run_job(self, job: BranchUpdateJob) -> None:
        leaf = job.leaf
        o = self.octant(0, leaf)
        was = self._in_job
        self._in_job = True
        try:
            sh, mask = self._up[0]
            self.ensure_branch(leaf)
            parent = self.cache.peek((1, leaf >> sh))
            if job.snapshot is not None:
                blk, mac = job.snapshot
                self.ledger.charge("hash.verify", self.cfg.hash_cycles)
                if leaf_hmac(self.crypto, self.geo.node_addr(0, leaf), blk,
                             parent.obj.counters[leaf & mask]) != mac:
                    raise IntegrityViolation(0, leaf)
                e = self.cache.peek((0, leaf))
                if e is not None and e.job is job:
                    e.verified = True
                    e.job = None
            self._bump_branch(leaf, job.delta, stale=True)
            self.pending_delta[o] -= job.delta
            job.done = True
        finally:
            self._in_job = was

    # -- eviction

    def persist_mac(self, entry: CacheEntry) -> int:
        """Leaf HMAC to store with a counter block being written back."""
        if not entry.stale:
            return entry.mac
        blk = entry.obj
        dummy = blk.leaf_sum()
        self._check_dummy(0, entry.key[1], dummy)
        self.ledger.charge("hash.evict", self.cfg.hash_cycles)
        entry.mac = leaf_hmac(self.crypto, entry.addr, blk, dummy)
        entry.stale = False
        return entry.mac

    def _check_dummy(self, level: int, index: int, dummy: int) -> None:
        o = self.octant(level, index)
        if not self.settled(o):
            return
        pc = self.parent_counter(level, index)
        if pc is None:
            return
        self.dummy_checks += 1
        if pc != dummy:
            self.dummy_mismatches += 1

    def writeback(self, victim: CacheEntry) -> None:
        if not victim.dirty:
            return
        lvl, idx = victim.key
        if self.scheme == "lazy":
            self._writeback_lazy(victim)
            return
        with self.ledger.offpath():
            if lvl == 0:
                mac = self.persist_mac(victim)
                self.ctl.enqueue_meta(("counter", idx), (victim.obj.copy(), mac))
                return
            node = victim.obj
            if victim.stale:
                dummy = dummy_counter(node)
                self._check_dummy(lvl, idx, dummy)
                self.ledger.charge("hash.evict", self.cfg.hash_cycles)
                node.hmac = sit_hmac(self.crypto, victim.addr, node, dummy)
                victim.stale = False
            self.ctl.enqueue_meta(("node", lvl, idx), (node.copy(),))

    def _writeback_lazy(self, victim: CacheEntry) -> None:
        lvl, idx = victim.key
        if lvl == 0:
            self.ctl.enqueue_meta(("counter", idx), (victim.obj.copy(), victim.mac))
            return
        plvl, pidx, slot = self.parent_of(lvl, idx)
        if plvl <= self.top:
            parent = self.verify_chain(plvl, pidx)
            parent.obj.counters[slot] += 1
            parent.dirty = True
            parent.stale = True
            pc = parent.obj.counters[slot]
        else:
            pc = self.ctl.root[slot]
        node = victim.obj
        node.hmac = sit_hmac(self.crypto, victim.addr, node, pc)
        victim.stale = False
        self.ledger.charge("hash.evict", self.cfg.hash_cycles)
        self.ctl.enqueue_meta(("node", lvl, idx), (node.copy(),))

    def tag_for(self, octant: int) -> Tuple[Optional[int], int]:
        if self.cfg.root_persist == "direct":
            return None, 0
        if self.scheme == "lazy":
            return self.ctl.root[octant], 0
        return self.ctl.queue.take_tag(octant, self.ctl.root[octant])

    def uses_prediction(self) -> bool:
        return self.cfg.root_persist == "tagged" and self.scheme != "lazy"


# --------------------------------------------------------------------------
# counter-summing reconstruction

@dataclass
class ReconstructionReport:
    root_match: bool
    hmac_failures: List[int]
    verdict: str
    rebuilt_root: List[int] = field(default_factory=list)
    nodes: Dict[Tuple[int, int], SitNode] = field(default_factory=dict)


def reconstruct(image, root: RootRegister, crypto: Crypto, dense: bool = False) -> ReconstructionReport:
    """Rebuild the tree bottom-up from (already recovered) counter blocks.

    Leaf HMACs are checked against their rebuilt parent counter, i.e. their own
    sum; intermediate HMACs are recomputed, not compared. With ``dense`` every
    leaf is visited; otherwise only leaves that differ from boot state, which
    gives the same answer because untouched subtrees sum to zero.
    """
    geo = image.geo
    leaves = range(geo.leaf_count) if dense else sorted(image.touched_leaves())
    failures = []
    sums: Dict[int, int] = {}
    for leaf in leaves:
        blk, mac = image.read_counter(leaf)
        s = blk.leaf_sum()
        if leaf_hmac(crypto, geo.node_addr(0, leaf), blk, s) != mac:
            failures.append(leaf)
        if s >> SIT_COUNTER_BITS:
            # cannot be represented in a parent slot; only a forged block gets here
            if leaf not in failures:
                failures.append(leaf)
            continue
        sums[leaf] = s
    nodes: Dict[Tuple[int, int], SitNode] = {}
    level_sums = sums
    for lvl in range(1, geo.top + 1):
        sh = geo.shifts[lvl] - geo.shifts[lvl - 1]
        mask = (1 << sh) - 1
        built: Dict[int, SitNode] = {}
        for idx, s in level_sums.items():
            node = built.get(idx >> sh)
            if node is None:
                node = built[idx >> sh] = SitNode()
            node.counters[idx & mask] = s
        for pidx, node in built.items():
            nodes[(lvl, pidx)] = node
        level_sums = {pidx: dummy_counter(node) for pidx, node in built.items()}
    rebuilt = [0] * FANOUT
    for idx, s in level_sums.items():
        rebuilt[idx] = s
    # intermediate HMACs, parent counter = the parent's rebuilt slot
    for (lvl, idx), node in nodes.items():
        if lvl == geo.top:
            pc = rebuilt[idx]
        else:
            sh = geo.shifts[lvl + 1] - geo.shifts[lvl]
            pc = nodes[(lvl + 1, idx >> sh)].counters[idx & ((1 << sh) - 1)]
        node.hmac = sit_hmac(crypto, geo.node_addr(lvl, idx), node, pc)
    match = rebuilt == list(root.counters)
    if failures:
        verdict = ROLL_FORWARD
    elif not match:
        verdict = ROLL_BACK
    else:
        verdict = CLEAN
    return ReconstructionReport(match, failures, verdict, rebuilt, nodes)
