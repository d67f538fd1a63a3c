"""ADR-protected write queue with root-counter tags.

User-data entries sit in tagged slots; each tag carries the root counter value
the write produced, and draining an entry copies that value into the
persistent root register. Because entry and tag are one queue slot, ADR
persists both or neither. Metadata write-backs use the untagged slots.

Tags for the predicted octant are prepared ahead of time (base+1, base+2, ...)
so that concurrent writers never read-increment-write the root themselves.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

from .metadata import LEAF_SPAN


class EntryKind(Enum):
    USER = "user"
    META = "meta"


class TagMismatch(AssertionError):
    """A prepared tag disagreed with the root value it was meant to carry."""


@dataclass(slots=True)
class WriteQueueEntry:
    kind: EntryKind
    key: tuple                  # ("data", addr) | ("counter", leaf) | ("node", level, index)
    payload: tuple
    tag: Optional[int] = None
    done_at: int = 0
    seq: int = 0

    @property
    def addr(self) -> int:
        return self.key[1]


def apply_entry(entry: WriteQueueEntry, image, octant_of_addr: Callable[[int], int]) -> None:
    """Persist one entry (and its tag) into ``image``."""
    what = entry.key[0]
    if what == "data":
        ct, mac = entry.payload
        image.write_data(entry.key[1], ct, mac)
        if entry.tag is not None:
            image.root.counters[octant_of_addr(entry.key[1])] = entry.tag
    elif what == "counter":
        block, mac = entry.payload
        image.write_counter(entry.key[1], block, mac)
    elif what == "node":
        (node,) = entry.payload
        image.write_node(entry.key[1], entry.key[2], node)
    else:
        raise ValueError(f"unknown entry key {entry.key!r}")


class WriteQueue:
    def __init__(self, image, octant_of_addr: Callable[[int], int], user_slots: int = 64,
                 meta_slots: int = 10, service_cycles: int = 600, tag_refill_cycles: int = 8,
                 banks: int = 8):
        self.image = image
        self.octant_of_addr = octant_of_addr
        self.user_slots = user_slots
        self.meta_slots = meta_slots
        self.service_cycles = service_cycles
        self.tag_refill_cycles = tag_refill_cycles
        self.entries: Deque[WriteQueueEntry] = deque()
        self.n_user = 0
        self.n_meta = 0
        self.latest: Dict[tuple, WriteQueueEntry] = {}
        # entries leave in FIFO order; up to ``banks`` of them are in service at once
        self.bank_free = [0] * banks
        self._seq = 0
        self.predicted_octant: Optional[int] = None
        # prepared tags are the consecutive values tag_base + 1 .. tag_base + tag_window
        self.tag_base = 0
        self.tag_window = 0
        self.refills = 0
        self.user_writes = 0
        self.meta_writes = 0
        self.stalls = {"user": 0, "meta": 0}
        self.stall_cycles = {"user": 0, "meta": 0}

    def __len__(self):
        return len(self.entries)

    # -- tag prediction

    def prefill_tags(self, octant: int, base_value: int) -> None:
        self.predicted_octant = octant
        self.tag_base = base_value
        self.tag_window = max(1, self.user_slots - self.n_user)

    def invalidate_prediction(self) -> None:
        self.predicted_octant = None
        self.tag_window = 0

    @property
    def prepared_tags(self) -> List[int]:
        return list(range(self.tag_base + 1, self.tag_base + 1 + self.tag_window))

    def take_tag(self, octant: int, new_value: int) -> Tuple[int, int]:
        """Tag for a write whose root increment produced ``new_value``.

        Returns (tag, refill stall cycles). Taking a tag slides the window so
        the next value is already prepared.
        """
        stall = 0
        if octant != self.predicted_octant or not self.tag_window:
            self.prefill_tags(octant, new_value - 1)
            self.refills += 1
            stall = self.tag_refill_cycles
        tag = self.tag_base + 1
        if tag != new_value:
            raise TagMismatch(f"prepared tag {tag} but root counter is {new_value}")
        self.tag_base = tag
        return tag, stall

    # -- slots

    def _retire_one(self) -> WriteQueueEntry:
        e = self.entries.popleft()
        apply_entry(e, self.image, self.octant_of_addr)
        if e.kind is EntryKind.USER:
            self.n_user -= 1
        else:
            self.n_meta -= 1
        if self.latest.get(e.key) is e:
            del self.latest[e.key]
        return e

    def retire_until(self, now: int) -> None:
        while self.entries and self.entries[0].done_at <= now:
            self._retire_one()

    def enqueue(self, entry: WriteQueueEntry, now: int) -> int:
        """Insert an entry at time ``now``; returns stall cycles spent waiting for a slot."""
        self.retire_until(now)
        user = entry.kind is EntryKind.USER
        # user entries may be untagged when the root register is written directly
        if not user and entry.tag is not None:
            raise ValueError("metadata entries carry no tag")
        cap = self.user_slots if user else self.meta_slots
        waited_until = now
        while (self.n_user if user else self.n_meta) >= cap:
            waited_until = max(waited_until, self._retire_one().done_at)
        stall = waited_until - now
        cls = "user" if user else "meta"
        if stall:
            self.stalls[cls] += 1
            self.stall_cycles[cls] += stall
        self._seq += 1
        entry.seq = self._seq
        entry.done_at = max(now + stall, self.bank_free[0]) + self.service_cycles
        heapq.heapreplace(self.bank_free, entry.done_at)
        self.entries.append(entry)
        self.latest[entry.key] = entry
        if user:
            self.n_user += 1
            self.user_writes += 1
        else:
            self.n_meta += 1
            self.meta_writes += 1
        return stall

    def lookup(self, key: tuple) -> Optional[WriteQueueEntry]:
        """Newest queued entry for ``key``, for read forwarding."""
        return self.latest.get(key)

    def drain_all(self) -> None:
        """ADR flush: every queued entry reaches NVM in FIFO order."""
        while self.entries:
            self._retire_one()

    def apply_to(self, image) -> None:
        """Apply queued entries to another image without retiring them."""
        for e in self.entries:
            apply_entry(e, image, self.octant_of_addr)


def octant_fn(geometry) -> Callable[[int], int]:
    shift = geometry.shifts[geometry.top]
    return lambda addr: (addr // LEAF_SPAN) >> shift


# --------------------------------------------------------------------------
# concurrent-writer interleavings

def interleavings(ops_per_thread: Sequence[int], steps_per_op: int = 2):
    """Every distinct ordering of the threads' steps (multiset permutations)."""
    pool = []
    for tid, n in enumerate(ops_per_thread):
        pool.extend([tid] * (n * steps_per_op))
    total = len(pool)

    def rec(remaining: List[int], prefix: List[int]):
        if len(prefix) == total:
            yield tuple(prefix)
            return
        for tid in range(len(remaining)):
            if remaining[tid]:
                remaining[tid] -= 1
                prefix.append(tid)
                yield from rec(remaining, prefix)
                prefix.pop()
                remaining[tid] += 1

    counts = [n * steps_per_op for n in ops_per_thread]
    yield from rec(counts, [])


def naive_tags(schedule: Sequence[int], n_threads: int, root0: int = 0) -> List[Tuple[int, int]]:
    """Writers read the root, then later write root+1 and use it as their tag.

    Returns (tag, root value right after that writer's update) per enqueue.
    """
    root = root0
    local = [None] * n_threads
    out = []
    for tid in schedule:
        if local[tid] is None:
            local[tid] = root
        else:
            root = local[tid] + 1
            out.append((root, root))
            local[tid] = None
    return out


def preupdate_tags(schedule: Sequence[int], n_threads: int, root0: int = 0,
                   octant: int = 0) -> List[Tuple[int, int]]:
    """Writers hand their data to the queue, which binds the next prepared tag to the slot.

    A writer's first step prepares its data without touching the root; its
    second step enters the queue, where the root increment and the prepared tag
    are taken together. Runs on a real WriteQueue so the production tag path is
    what gets exercised. Returns (tag, root right after that entry) per enqueue.
    """
    from .crypto import Crypto
    from .metadata import make_geometry
    from .nvm import NvmImage
    geo = make_geometry(1 << 20)
    image = NvmImage(Crypto.from_seed(0), geo)
    q = WriteQueue(image, octant_fn(geo), service_cycles=0)
    q.prefill_tags(octant, root0)
    root = root0
    prepared = [False] * n_threads
    out = []
    addr = octant * (geo.mem_size // 8)
    for tid in schedule:
        if not prepared[tid]:
            prepared[tid] = True
            continue
        root += 1
        tag, _ = q.take_tag(octant, root)
        q.enqueue(WriteQueueEntry(EntryKind.USER, ("data", addr), (bytes(64), 0), tag=tag), 0)
        out.append((tag, root))
        prepared[tid] = False
    q.drain_all()
    if out and image.root.counters[octant] != root:
        raise TagMismatch("persisted root differs from the final root")
    return out
