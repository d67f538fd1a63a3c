"""Persistent security metadata: counter blocks, SIT/BMT nodes, root register.

Also owns the address layout: which counter block covers an address, which
tree nodes sit above it, and where every structure lives in the NVM image.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Tuple

BLOCK = 64                    # bytes per line
BLOCKS_PER_LEAF = 64          # data blocks covered by one counter block
LEAF_SPAN = BLOCK * BLOCKS_PER_LEAF   # 4 KiB
FANOUT = 8
SIT_COUNTER_BITS = 56
SIT_COUNTER_MAX = (1 << SIT_COUNTER_BITS) - 1
DEFAULT_MEM_SIZE = 16 << 30


class AddressError(ValueError):
    pass


def check_block_addr(addr: int, mem_size: int) -> None:
    if addr % BLOCK:
        raise AddressError(f"address {addr:#x} is not 64-byte aligned")
    if not 0 <= addr < mem_size:
        raise AddressError(f"address {addr:#x} outside memory of {mem_size:#x} bytes")


# --------------------------------------------------------------------------
# counter block (CME leaf)

@lru_cache(maxsize=None)
def _squeeze_plan(bits: int):
    """Masks that squeeze 64 byte-wide lanes holding ``bits`` bits each into a dense bit string.

    Each step merges neighbouring lanes pairwise, so six steps pack all 64.
    """
    steps = []
    width = 8
    while width < 8 * BLOCKS_PER_LEAF:
        lo = 0
        for k in range(8 * BLOCKS_PER_LEAF // (2 * width)):
            lo |= ((1 << bits) - 1) << (2 * width * k)
        steps.append((lo, lo << width, width - bits))
        width *= 2
        bits *= 2
    return tuple(steps)


class CounterBlock:
    """One 64-bit major counter plus 64 minor counters of ``minor_bits`` each."""

    __slots__ = ("major", "minors", "minor_bits")

    def __init__(self, major: int = 0, minors: List[int] | None = None, minor_bits: int = 7):
        self.major = major
        self.minors = list(minors) if minors is not None else [0] * BLOCKS_PER_LEAF
        self.minor_bits = minor_bits
        if len(self.minors) != BLOCKS_PER_LEAF:
            raise ValueError("a counter block holds exactly 64 minors")

    def increment_minor(self, idx: int) -> bool:
        """Bump one minor; on overflow bump the major and zero every minor.

        Returns True when the overflow path was taken.
        """
        if not 0 <= idx < BLOCKS_PER_LEAF:
            raise IndexError(idx)
        if self.minors[idx] + 1 < (1 << self.minor_bits):
            self.minors[idx] += 1
            return False
        self.major += 1
        self.minors = [0] * BLOCKS_PER_LEAF
        return True

    def leaf_sum(self) -> int:
        return self.major + sum(self.minors)

    def copy(self) -> "CounterBlock":
        c = CounterBlock.__new__(CounterBlock)
        c.major = self.major
        c.minors = self.minors[:]
        c.minor_bits = self.minor_bits
        return c

    @property
    def encoded_size(self) -> int:
        return 8 + (BLOCKS_PER_LEAF * self.minor_bits + 7) // 8

    def encode(self) -> bytes:
        bits = self.minor_bits
        if bits <= 8:
            packed = int.from_bytes(bytes(self.minors), "little")
            for lo, hi, sh in _squeeze_plan(bits):
                packed = (packed & lo) | ((packed & hi) >> sh)
        else:
            packed = 0
            for m in reversed(self.minors):
                packed = (packed << bits) | m
        return self.major.to_bytes(8, "little") + packed.to_bytes(self.encoded_size - 8, "little")

    @classmethod
    def decode(cls, raw: bytes, minor_bits: int = 7) -> "CounterBlock":
        size = 8 + (BLOCKS_PER_LEAF * minor_bits + 7) // 8
        if len(raw) != size:
            raise ValueError(f"counter block must be {size} bytes, got {len(raw)}")
        major = int.from_bytes(raw[:8], "little")
        packed = int.from_bytes(raw[8:], "little")
        mask = (1 << minor_bits) - 1
        minors = [(packed >> (minor_bits * i)) & mask for i in range(BLOCKS_PER_LEAF)]
        return cls(major, minors, minor_bits)

    def __eq__(self, other):
        if not isinstance(other, CounterBlock):
            return NotImplemented
        return self.major == other.major and self.minors == other.minors

    def __repr__(self):
        nz = {i: m for i, m in enumerate(self.minors) if m}
        return f"CounterBlock(major={self.major}, minors={nz})"


def leaf_sum(block: CounterBlock) -> int:
    return block.leaf_sum()


# --------------------------------------------------------------------------
# SIT / BMT nodes and the root

class SitNode:
    """Eight 56-bit counters and one 64-bit HMAC: exactly one cache line."""

    __slots__ = ("counters", "hmac")

    def __init__(self, counters: List[int] | None = None, hmac: int = 0):
        self.counters = list(counters) if counters is not None else [0] * FANOUT
        self.hmac = hmac

    def copy(self) -> "SitNode":
        return SitNode(self.counters, self.hmac)

    def encode(self) -> bytes:
        return self.counter_bytes() + self.hmac.to_bytes(8, "little")

    def counter_bytes(self) -> bytes:
        try:
            return b"".join([c.to_bytes(7, "little") for c in self.counters])
        except OverflowError:
            bad = next(c for c in self.counters if not 0 <= c <= SIT_COUNTER_MAX)
            raise OverflowError(f"SIT counter {bad} does not fit in 56 bits") from None

    @classmethod
    def decode(cls, raw: bytes) -> "SitNode":
        if len(raw) != BLOCK:
            raise ValueError("SIT node must be 64 bytes")
        packed = int.from_bytes(raw[:56], "little")
        counters = [(packed >> (SIT_COUNTER_BITS * i)) & SIT_COUNTER_MAX for i in range(FANOUT)]
        return cls(counters, int.from_bytes(raw[56:], "little"))

    def __eq__(self, other):
        if not isinstance(other, SitNode):
            return NotImplemented
        return self.counters == other.counters and self.hmac == other.hmac

    def __repr__(self):
        return f"SitNode({self.counters}, hmac={self.hmac:#018x})"


def dummy_counter(node: SitNode) -> int:
    """Sum of a node's counters; stands in for its parent counter."""
    return sum(node.counters)


class BmtNode:
    """Eight 64-bit child digests."""

    __slots__ = ("hmacs",)

    def __init__(self, hmacs: List[int] | None = None):
        self.hmacs = list(hmacs) if hmacs is not None else [0] * FANOUT

    def copy(self) -> "BmtNode":
        return BmtNode(self.hmacs)

    def encode(self) -> bytes:
        return b"".join(h.to_bytes(8, "little") for h in self.hmacs)

    @classmethod
    def decode(cls, raw: bytes) -> "BmtNode":
        if len(raw) != BLOCK:
            raise ValueError("BMT node must be 64 bytes")
        return cls([int.from_bytes(raw[i:i + 8], "little") for i in range(0, BLOCK, 8)])

    def __eq__(self, other):
        if not isinstance(other, BmtNode):
            return NotImplemented
        return self.hmacs == other.hmacs

    def __repr__(self):
        return f"BmtNode({[hex(h) for h in self.hmacs]})"


@dataclass
class RootRegister:
    """On-chip non-volatile root: eight 64-bit counters (one per memory octant)."""

    counters: List[int] = field(default_factory=lambda: [0] * FANOUT)

    def copy(self) -> "RootRegister":
        return RootRegister(list(self.counters))


# --------------------------------------------------------------------------
# geometry and layout

@dataclass(frozen=True)
class TreeGeometry:
    """Shape of the integrity tree for a given memory size.

    Level 0 holds the counter blocks. Levels 1..top are SIT nodes, 8-ary except
    for the top level, which always has exactly eight nodes (one per root
    counter) and a fanout of whatever power of two makes the octants line up.
    The root sits above ``top``; ``levels`` counts leaves and root.
    """

    mem_size: int
    leaf_count: int
    top: int
    shifts: Tuple[int, ...]        # shifts[l]: leaf index >> shifts[l] = node index at level l
    level_base: Tuple[int, ...]    # NVM byte address of node 0 at level l (l >= 1)
    counter_base: int

    @property
    def levels(self) -> int:
        return self.top + 2

    @property
    def fanout(self) -> int:
        return FANOUT

    @property
    def octant_leaves(self) -> int:
        return self.leaf_count // FANOUT

    def nodes_at(self, level: int) -> int:
        return self.leaf_count >> self.shifts[level]

    def level_fanout(self, level: int) -> int:
        """Children per node at ``level`` (level top+1 is the root)."""
        return 1 << (self.shifts[level] - self.shifts[level - 1])

    def node_index(self, leaf: int, level: int) -> int:
        return leaf >> self.shifts[level]

    def child_slot(self, level: int, child_index: int) -> int:
        """Slot of a level-(level-1) node inside its level-``level`` parent."""
        return child_index & (self.level_fanout(level) - 1)

    def node_addr(self, level: int, index: int) -> int:
        if level == 0:
            return self.counter_base + index * BLOCK
        return self.level_base[level] + index * BLOCK

    def octant_of_leaf(self, leaf: int) -> int:
        return leaf >> self.shifts[self.top]

    def octant_of_node(self, level: int, index: int) -> int:
        return index >> (self.shifts[self.top] - self.shifts[level])

    @property
    def end(self) -> int:
        """First byte past the tree region."""
        return self.level_base[self.top] + self.nodes_at(self.top) * BLOCK


def make_geometry(mem_size: int = DEFAULT_MEM_SIZE) -> TreeGeometry:
    if mem_size % LEAF_SPAN:
        raise ValueError("memory size must be a multiple of 4 KiB")
    leaves = mem_size // LEAF_SPAN
    k = leaves.bit_length() - 1
    if leaves != 1 << k or k < 4:
        raise ValueError("memory size must be a power of two of at least 64 KiB")
    top = -(-(k - 3) // 3)
    shifts = [0] + [3 * lvl for lvl in range(1, top)] + [k - 3, k]
    counter_base = mem_size
    bases = [0]
    cursor = counter_base + leaves * BLOCK
    for lvl in range(1, top + 1):
        bases.append(cursor)
        cursor += (leaves >> shifts[lvl]) * BLOCK
    return TreeGeometry(mem_size, leaves, top, tuple(shifts), tuple(bases), counter_base)


def layout(addr: int, geometry: TreeGeometry) -> Tuple[int, List[int], int]:
    """(leaf index, ancestor SIT node addresses bottom-up, octant) for ``addr``."""
    if not 0 <= addr < geometry.mem_size:
        raise AddressError(f"address {addr:#x} out of range")
    leaf = addr // LEAF_SPAN
    branch = [geometry.node_addr(lvl, geometry.node_index(leaf, lvl))
              for lvl in range(1, geometry.top + 1)]
    return leaf, branch, geometry.octant_of_leaf(leaf)
