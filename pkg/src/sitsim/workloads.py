"""Synthetic traces and the plain-text trace format.

The generators only mimic the address-pattern character of persistent data
structure benchmarks (locality, read/write mix); they are not captures of
real programs.

Trace file format, one op per line:
    W <hex-addr> [<128 hex chars of payload>]
    R <hex-addr>
``#`` starts a comment; blank lines are ignored.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Union

from .metadata import BLOCK, DEFAULT_MEM_SIZE

KINDS = ("array", "btree", "hash", "queue", "rbtree", "seqwrite", "randwrite")
WORKLOAD_KINDS = ("array", "btree", "hash", "queue", "rbtree")

# read shares per generator (fraction of ops that are reads)
READ_SHARE = {"array": 0.1, "queue": 0.1, "hash": 0.1, "btree": 0.5, "rbtree": 0.5,
              "seqwrite": 0.0, "randwrite": 0.0}


class TraceError(ValueError):
    pass


@dataclass
class TraceOp:
    kind: str            # "R" or "W"
    addr: int
    payload: Optional[bytes] = None

    def __post_init__(self):
        if self.kind not in ("R", "W"):
            raise TraceError(f"op kind must be R or W, got {self.kind!r}")


@dataclass
class Trace:
    ops: List[TraceOp]
    seed: int = 0
    kind: str = "file"
    mem_size: int = DEFAULT_MEM_SIZE
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    @property
    def writes(self) -> int:
        return sum(op.kind == "W" for op in self.ops)

    def dumps(self) -> str:
        lines = [f"# kind={self.kind} seed={self.seed} ops={len(self.ops)}"]
        for op in self.ops:
            if op.kind == "W":
                lines.append(f"W {op.addr:#x} {op.payload.hex()}")
            else:
                lines.append(f"R {op.addr:#x}")
        return "\n".join(lines) + "\n"


def default_payload(addr: int, index: int, seed: int) -> bytes:
    """Distinct, reproducible data for every write."""
    h = hashlib.blake2b(addr.to_bytes(8, "little") + index.to_bytes(8, "little")
                        + seed.to_bytes(8, "little"), digest_size=64, key=b"sitsim-payload")
    return h.digest()


class _Builder:
    def __init__(self, seed: int, mem_size: int):
        self.seed = seed
        self.mem_size = mem_size
        self.ops: List[TraceOp] = []

    def w(self, addr: int) -> None:
        self.ops.append(TraceOp("W", addr, default_payload(addr, len(self.ops), self.seed)))

    def r(self, addr: int) -> None:
        self.ops.append(TraceOp("R", addr))


def _span(mem_size: int, want: int) -> int:
    return max(BLOCK, min(want, mem_size) // BLOCK * BLOCK)


def _array(rng: random.Random, b: _Builder, n: int) -> None:
    span = _span(b.mem_size, 1 << 20)
    base = rng.randrange(0, b.mem_size - span + 1, BLOCK)
    stride = BLOCK * rng.choice((1, 2, 4))
    pos = 0
    while len(b.ops) < n:
        addr = base + pos % span
        if rng.random() < READ_SHARE["array"]:
            b.r(addr)
        else:
            b.w(addr)
        pos += stride


def _queue(rng: random.Random, b: _Builder, n: int) -> None:
    span = _span(b.mem_size, 1 << 18)
    base = rng.randrange(0, b.mem_size - span + 1, BLOCK)
    slots = span // BLOCK - 1
    header = base                      # head/tail pointers
    head = tail = 0
    while len(b.ops) < n:
        if rng.random() < READ_SHARE["queue"]:
            b.r(base + BLOCK * (1 + head % slots))
            continue
        if len(b.ops) % 2 == 0 or head == tail:
            b.w(base + BLOCK * (1 + tail % slots))     # enqueue at the tail
            tail += 1
        else:
            head += 1                                   # dequeue moves the head
        if len(b.ops) < n:
            b.w(header)


def _hash(rng: random.Random, b: _Builder, n: int) -> None:
    blocks = b.mem_size // BLOCK
    written: List[int] = []
    while len(b.ops) < n:
        if written and rng.random() < READ_SHARE["hash"]:
            b.r(rng.choice(written))
        else:
            addr = rng.randrange(blocks) * BLOCK
            written.append(addr)
            b.w(addr)


def _tree(rng: random.Random, b: _Builder, n: int, kind: str) -> None:
    # node ids map to blocks of a heap region through a fixed permutation;
    # popular nodes follow a power law, lookups chase a root-to-leaf path
    span = _span(b.mem_size, 1 << 22)
    base = rng.randrange(0, b.mem_size - span + 1, BLOCK)
    n_nodes = max(16, min(span // BLOCK, 4 * n))
    perm = list(range(span // BLOCK))
    rng.shuffle(perm)
    depth = max(2, n_nodes.bit_length() - (1 if kind == "btree" else 0))
    alpha = 1.2 if kind == "btree" else 1.05
    max_hops = max(2, depth // 2)
    # a lookup emits several reads; pick its probability so reads make up READ_SHARE of ops
    hops = (2 + max_hops) / 2
    per_update = 1.3 if kind == "rbtree" else 1.0
    s = READ_SHARE[kind]
    share = s * per_update / (hops * (1 - s) + s * per_update)

    def node_addr(node: int) -> int:
        return base + perm[node % len(perm)] * BLOCK

    while len(b.ops) < n:
        target = min(n_nodes - 1, int(rng.paretovariate(alpha)) - 1)
        if rng.random() < share:
            # pointer chase: walk a path of nodes ending at the target
            n_hops = rng.randint(2, max_hops)
            node = 0
            for _ in range(n_hops):
                if len(b.ops) >= n:
                    break
                b.r(node_addr(node))
                node = (node * 2 + 1 + rng.randrange(2)) % n_nodes
        else:
            b.w(node_addr(target))
            if kind == "rbtree" and len(b.ops) < n and rng.random() < 0.3:
                b.w(node_addr((target - 1) // 2 if target else 0))   # recolour the parent


def _seqwrite(rng: random.Random, b: _Builder, n: int) -> None:
    for i in range(n):
        b.w((i * BLOCK) % b.mem_size)


def _randwrite(rng: random.Random, b: _Builder, n: int) -> None:
    blocks = b.mem_size // BLOCK
    for _ in range(n):
        b.w(rng.randrange(blocks) * BLOCK)


def gen_trace(kind: str, n: int, seed: int = 0, mem_size: int = DEFAULT_MEM_SIZE) -> Trace:
    if kind not in KINDS:
        raise TraceError(f"unknown trace kind {kind!r}; expected one of {', '.join(KINDS)}")
    if n <= 0:
        raise TraceError("trace length must be positive")
    rng = random.Random(f"{kind}:{seed}:{mem_size}")
    b = _Builder(seed, mem_size)
    if kind in ("btree", "rbtree"):
        _tree(rng, b, n, kind)
    else:
        {"array": _array, "queue": _queue, "hash": _hash,
         "seqwrite": _seqwrite, "randwrite": _randwrite}[kind](rng, b, n)
    return Trace(b.ops[:n], seed, kind, mem_size)


def parse_trace(source: Union[str, Path, Iterable[str]], seed: int = 0,
                mem_size: int = DEFAULT_MEM_SIZE) -> Trace:
    """Parse a trace file (path) or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    ops: List[TraceOp] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op = parts[0].upper()
        if op not in ("R", "W") or len(parts) < 2 or (op == "R" and len(parts) != 2) or len(parts) > 3:
            raise TraceError(f"line {lineno}: malformed op {raw.strip()!r}")
        try:
            addr = int(parts[1], 16)
        except ValueError:
            raise TraceError(f"line {lineno}: bad address {parts[1]!r}") from None
        if addr % BLOCK:
            raise TraceError(f"line {lineno}: address {addr:#x} is not 64-byte aligned")
        if not 0 <= addr < mem_size:
            raise TraceError(f"line {lineno}: address {addr:#x} outside memory")
        if op == "R":
            ops.append(TraceOp("R", addr))
            continue
        if len(parts) == 3:
            try:
                payload = bytes.fromhex(parts[2])
            except ValueError:
                raise TraceError(f"line {lineno}: payload is not hex") from None
            if len(payload) != BLOCK:
                raise TraceError(f"line {lineno}: payload must be 128 hex characters")
        else:
            payload = default_payload(addr, len(ops), seed)
        ops.append(TraceOp("W", addr, payload))
    return Trace(ops, seed, "file", mem_size)
