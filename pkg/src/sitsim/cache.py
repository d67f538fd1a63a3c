"""Set-associative LRU cache for counter blocks and tree nodes."""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Hashable, List, Optional


class CacheEntry:
    __slots__ = ("key", "addr", "obj", "dirty", "stale", "verified", "persisted", "job", "mac")

    def __init__(self, key, addr, obj, dirty=False, stale=False, verified=True, mac=0):
        self.key = key
        self.addr = addr
        self.obj = obj
        self.dirty = dirty        # differs from the NVM copy
        self.stale = stale        # stored HMAC no longer matches the contents
        self.verified = verified
        self.persisted = None     # counter blocks: minors as last persisted
        self.job = None           # counter blocks: job that will verify the fetched copy
        self.mac = mac            # counter blocks: leaf HMAC (SIT nodes keep theirs inline)

    def __repr__(self):
        flags = "".join(c for c, on in (("D", self.dirty), ("S", self.stale), ("V", self.verified)) if on)
        return f"<CacheEntry {self.key} {flags}>"


class MetadataCache:
    """``lines`` lines split into sets of ``ways``; line address picks the set.

    Pinned entries are never chosen as victims. When every way of a set is
    pinned the set is allowed to overfill; ``unpin_all`` trims it back.
    """

    def __init__(self, lines: int, ways: int):
        if lines % ways:
            raise ValueError("lines must be a multiple of ways")
        self.ways = ways
        self.n_sets = lines // ways
        self.sets: List[OrderedDict] = [OrderedDict() for _ in range(self.n_sets)]
        self.index: Dict[Hashable, CacheEntry] = {}
        self.pinned: set = set()
        self._overfull: set = set()     # set indices holding more than ``ways`` lines
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self):
        return len(self.index)

    def __contains__(self, key):
        return key in self.index

    def _set_of(self, addr: int) -> OrderedDict:
        return self.sets[(addr >> 6) % self.n_sets]

    def access(self, key) -> Optional[CacheEntry]:
        """Look up and refresh LRU position; counts toward hit/miss stats."""
        e = self.index.get(key)
        if e is None:
            self.misses += 1
            return None
        self.hits += 1
        self.sets[(e.addr >> 6) % self.n_sets].move_to_end(key)
        return e

    def peek(self, key) -> Optional[CacheEntry]:
        return self.index.get(key)

    def insert(self, entry: CacheEntry) -> List[CacheEntry]:
        if entry.key in self.index:
            raise KeyError(f"{entry.key} already cached")
        si = (entry.addr >> 6) % self.n_sets
        s = self.sets[si]
        victims = []
        if len(s) >= self.ways:
            v = self._victim(s)
            if v is None:
                self._overfull.add(si)
            else:
                victims.append(v)
        s[entry.key] = entry
        self.index[entry.key] = entry
        return victims

    def _victim(self, s: OrderedDict) -> Optional[CacheEntry]:
        for key in s:
            if key not in self.pinned:
                e = s.pop(key)
                del self.index[key]
                self.evictions += 1
                return e
        return None

    def remove(self, key) -> Optional[CacheEntry]:
        e = self.index.pop(key, None)
        if e is not None:
            del self._set_of(e.addr)[key]
            self.pinned.discard(key)
        return e

    def pin(self, key) -> None:
        self.pinned.add(key)

    def unpin_all(self) -> List[CacheEntry]:
        """Release pins and return victims needed to bring sets back to size."""
        self.pinned.clear()
        if not self._overfull:
            return []
        victims = []
        for si in sorted(self._overfull):
            s = self.sets[si]
            while len(s) > self.ways:
                victims.append(self._victim(s))
        self._overfull.clear()
        return victims

    def entries(self):
        return list(self.index.values())

    @property
    def hit_ratio(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0
