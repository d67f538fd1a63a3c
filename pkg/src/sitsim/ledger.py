"""Cycle accounting.

Every cost the controller pays is charged to a named category. Charges made
inside ``offpath()`` land in a separate background account and never add to
the latency of the operation in flight.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Tuple


class _Offpath:
    __slots__ = ("ledger",)

    def __init__(self, ledger):
        self.ledger = ledger

    def __enter__(self):
        self.ledger._off += 1

    def __exit__(self, *exc):
        self.ledger._off -= 1
        return False


class CycleLedger:
    def __init__(self):
        self.counts: Counter = Counter()
        self.cycles: Counter = Counter()
        self.off_counts: Counter = Counter()
        self.off_cycles: Counter = Counter()
        self.ops: List[Tuple[str, int]] = []   # (kind, critical-path cycles)
        self.current = 0
        self._kind = None
        self._off = 0
        self._offpath = _Offpath(self)

    def offpath(self) -> _Offpath:
        """Context manager; charges inside it go to the background account (nestable)."""
        return self._offpath

    @contextmanager
    def onpath(self):
        """Charge to the request in flight even from inside an offpath() section."""
        saved, self._off = self._off, 0
        try:
            yield
        finally:
            self._off = saved

    @property
    def is_offpath(self) -> bool:
        return self._off > 0

    def charge(self, category: str, cycles: int = 0, n: int = 1) -> None:
        if self._off:
            self.off_counts[category] += n
            self.off_cycles[category] += cycles
        else:
            self.counts[category] += n
            self.cycles[category] += cycles
            self.current += cycles

    def begin_op(self, kind: str) -> None:
        self._kind = kind
        self.current = 0

    def end_op(self) -> int:
        lat = self.current
        self.ops.append((self._kind, lat))
        self._kind = None
        self.current = 0
        return lat

    # -- derived quantities

    @property
    def total_cycles(self) -> int:
        return sum(c for _, c in self.ops)

    def latencies(self, kind: str) -> List[int]:
        return [c for k, c in self.ops if k == kind]

    def count(self, prefix: str, offpath: bool | None = None) -> int:
        """Number of charges whose category starts with ``prefix``.

        offpath=None sums both accounts.
        """
        total = 0
        if offpath in (None, False):
            total += sum(n for k, n in self.counts.items() if k.startswith(prefix))
        if offpath in (None, True):
            total += sum(n for k, n in self.off_counts.items() if k.startswith(prefix))
        return total

    def cycles_of(self, prefix: str, offpath: bool = False) -> int:
        src = self.off_cycles if offpath else self.cycles
        return sum(c for k, c in src.items() if k.startswith(prefix))

    def snapshot(self) -> Dict[str, int]:
        out = {f"on.{k}": v for k, v in self.counts.items()}
        out.update({f"off.{k}": v for k, v in self.off_counts.items()})
        return dict(sorted(out.items()))


REPORT_FIELDS = (
    "scheme", "ops", "writes", "reads", "total_cycles", "avg_write_latency_cycles",
    "avg_read_latency_cycles", "metadata_cache_hit_ratio", "metadata_write_fraction",
    "hash_count", "critical_hash_count", "tree_node_reads", "stalls", "stall_cycles",
    "final_root",
)


@dataclass
class RunReport:
    scheme: str
    ops: int
    writes: int
    reads: int
    total_cycles: int
    avg_write_latency_cycles: float
    avg_read_latency_cycles: float
    metadata_cache_hit_ratio: float
    metadata_write_fraction: float
    hash_count: int
    critical_hash_count: int
    tree_node_reads: int
    stalls: int
    stall_cycles: int
    final_root: List[int] = field(default_factory=list)

    def row(self) -> Dict[str, object]:
        d = {name: getattr(self, name) for name in REPORT_FIELDS}
        d["final_root"] = ":".join(str(v) for v in self.final_root)
        return d
