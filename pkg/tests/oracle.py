"""Independent reference models used as test oracles.

Nothing here imports the simulator's counter or tree code.
"""
from __future__ import annotations

from typing import Dict, Iterable, List, Tuple


def counter_state(write_addrs: Iterable[int], minor_bits: int = 7) -> Dict[int, Tuple[int, List[int]]]:
    """leaf -> (major, minors) after the given writes, split counters with a shared major."""
    state: Dict[int, Tuple[int, List[int]]] = {}
    wrap = 1 << minor_bits
    for a in write_addrs:
        leaf, slot = a // 4096, (a // 64) % 64
        major, minors = state.get(leaf, (0, [0] * 64))
        if minors[slot] + 1 == wrap:
            major, minors = major + 1, [0] * 64
        else:
            minors = list(minors)
            minors[slot] += 1
        state[leaf] = (major, minors)
    return state


def root_of(write_addrs: Iterable[int], mem_size: int, minor_bits: int = 7) -> List[int]:
    """Root counters as sums of every counter block in each eighth of memory."""
    per_octant = mem_size // 4096 // 8
    root = [0] * 8
    for leaf, (major, minors) in counter_state(write_addrs, minor_bits).items():
        root[leaf // per_octant] += major + sum(minors)
    return root


def sit_node_levels(mem_size: int) -> int:
    """Number of SIT node levels between the counter blocks and the root.

    Eight-ary from the bottom, with the top level always holding exactly eight nodes.
    """
    leaves = mem_size // 4096
    levels = 0
    n = leaves
    while n > 8:
        n = max(8, n // 8)
        levels += 1
    return levels
