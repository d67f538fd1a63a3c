"""Bonsai Merkle tree over the counter blocks (hash-tree baseline).

Each BMT node stores the digests of its children; a node's own digest is the
keyed hash of its 64 bytes. The eight top-level digests live in the on-chip
root register. Geometry is shared with the SIT so both trees have the same
shape over the same leaves.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from .cache import CacheEntry
from .crypto import Crypto
from .macs import digest
from .metadata import FANOUT, BmtNode, CounterBlock, TreeGeometry
from .tree import IntegrityViolation


def pristine_levels(crypto: Crypto, geo: TreeGeometry, minor_bits: int) -> List[Tuple[Optional[BmtNode], int]]:
    """(boot node, its digest) per level; level 0 is (None, digest of an all-zero counter block)."""
    out: List[Tuple[Optional[BmtNode], int]] = [
        (None, digest(crypto, CounterBlock(minor_bits=minor_bits).encode()))]
    for lvl in range(1, geo.top + 1):
        fan = geo.level_fanout(lvl)
        node = BmtNode([out[-1][1]] * fan + [0] * (FANOUT - fan))
        out.append((node, digest(crypto, node.encode())))
    return out


def fold(crypto: Crypto, geo: TreeGeometry, leaves: Dict[int, CounterBlock],
         minor_bits: int) -> Tuple[List[int], Dict[Tuple[int, int], BmtNode]]:
    """Root digests and rebuilt nodes for the given leaf contents (others at boot state)."""
    pristine = pristine_levels(crypto, geo, minor_bits)
    level = {leaf: digest(crypto, blk.encode()) for leaf, blk in leaves.items()}
    nodes: Dict[Tuple[int, int], BmtNode] = {}
    for lvl in range(1, geo.top + 1):
        sh = geo.shifts[lvl] - geo.shifts[lvl - 1]
        mask = (1 << sh) - 1
        built: Dict[int, BmtNode] = {}
        for idx, d in level.items():
            node = built.get(idx >> sh)
            if node is None:
                node = built[idx >> sh] = pristine[lvl][0].copy()
            node.hmacs[idx & mask] = d
        nodes.update({(lvl, j): n for j, n in built.items()})
        level = {j: digest(crypto, n.encode()) for j, n in built.items()}
    root = [pristine[geo.top][1]] * FANOUT
    for j, d in level.items():
        root[j] = d
    return root, nodes


class BmtTree:
    """Runtime BMT maintenance with the same interface the controller uses for SitTree."""

    def __init__(self, ctl):
        self.ctl = ctl
        self.cfg = ctl.cfg
        self.geo = ctl.geo
        self.crypto = ctl.crypto
        self.cache = ctl.cache
        self.ledger = ctl.ledger
        self.lazy = ctl.cfg.scheme == "bmt-lazy"
        self.top = self.geo.top
        shifts = self.geo.shifts
        self._up = [(shifts[lvl + 1] - shifts[lvl], (1 << (shifts[lvl + 1] - shifts[lvl])) - 1)
                    for lvl in range(self.top + 1)]

    def parent_of(self, level: int, index: int):
        sh, mask = self._up[level]
        return level + 1, index >> sh, index & mask

    def expected_digest(self, level: int, index: int) -> int:
        plvl, pidx, slot = self.parent_of(level, index)
        if plvl > self.top:
            return self.ctl.root[slot]
        return self.cache.peek((plvl, pidx)).obj.hmacs[slot]

    def verify_chain(self, level: int, index: int) -> CacheEntry:
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
        for lvl, idx in reversed(missing):
            if cache.peek((lvl, idx)) is not None:
                cache.pin((lvl, idx))
                continue
            addr = self.geo.node_addr(lvl, idx)
            if lvl == 0:
                obj, _ = self.ctl.nvm_counter(idx)
                self.ledger.charge("read.tree.counter", self.cfg.nvm_read_cycles)
            else:
                obj = self.ctl.nvm_node(lvl, idx)
                self.ledger.charge("read.tree", self.cfg.nvm_read_cycles)
            self.ledger.charge("hash.verify", self.cfg.hash_cycles)
            if digest(self.crypto, obj.encode()) != self.expected_digest(lvl, idx):
                raise IntegrityViolation(lvl, idx, "digest mismatch")
            e = CacheEntry((lvl, idx), addr, obj)
            if lvl == 0:
                e.persisted = list(obj.minors)
            self.ctl.cache_insert(e, pin=True)
        return cache.peek((level, index))

    def ensure_branch(self, leaf: int) -> None:
        idx = leaf
        keys = []
        for lvl in range(1, self.top + 1):
            idx >>= self._up[lvl - 1][0]
            keys.append((lvl, idx))
        for key in reversed(keys):
            if self.cache.access(key) is None:
                self.verify_chain(*key)
            else:
                self.cache.pin(key)

    def acquire_counter(self, leaf: int) -> CacheEntry:
        return self.verify_chain(0, leaf)

    def prepare_read(self, leaf: int, entry) -> CacheEntry:
        return entry if entry is not None else self.verify_chain(0, leaf)

    def update(self, leaf: int, entry: CacheEntry, delta: int) -> None:
        entry.stale = False
        d = digest(self.crypto, entry.obj.encode())
        if self.lazy:
            sh, mask = self._up[0]
            parent = self.verify_chain(1, leaf >> sh)
            parent.obj.hmacs[leaf & mask] = d
            parent.dirty = True
            parent.stale = True
            self.ledger.charge("hash.update", self.cfg.hash_cycles)
            return
        self.ensure_branch(leaf)
        idx = leaf
        for lvl in range(1, self.top + 1):
            sh, mask = self._up[lvl - 1]
            e = self.cache.peek((lvl, idx >> sh))
            e.obj.hmacs[idx & mask] = d
            e.dirty = True
            d = digest(self.crypto, e.obj.encode())
            idx >>= sh
        self.ctl.root[idx] = d
        n = self.top + 1
        self.ledger.charge("hash.update", n * self.cfg.hash_cycles, n=n)

    # no background work in either BMT variant
    def has_jobs(self) -> bool:
        return False

    def run_next_job(self) -> None:
        pass

    def persist_mac(self, entry: CacheEntry) -> int:
        return 0

    def writeback(self, victim: CacheEntry) -> None:
        if not victim.dirty:
            return
        lvl, idx = victim.key
        if lvl == 0:
            with self.ledger.offpath():
                self.ctl.enqueue_meta(("counter", idx), (victim.obj.copy(), 0))
            return
        if self.lazy and victim.stale:
            # the parent learns this node's digest only now
            d = digest(self.crypto, victim.obj.encode())
            self.ledger.charge("hash.evict", self.cfg.hash_cycles)
            plvl, pidx, slot = self.parent_of(lvl, idx)
            if plvl <= self.top:
                parent = self.verify_chain(plvl, pidx)
                parent.obj.hmacs[slot] = d
                parent.dirty = True
                parent.stale = True
            else:
                self.ctl.root[slot] = d
            victim.stale = False
        with self.ledger.offpath():
            self.ctl.enqueue_meta(("node", lvl, idx), (victim.obj.copy(),))

    def tag_for(self, octant: int):
        if self.cfg.root_persist == "direct":
            return None, 0
        return self.ctl.root[octant], 0

    def uses_prediction(self) -> bool:
        return False
