from __future__ import annotations

from collections import OrderedDict

import pytest
from hypothesis import given, settings, strategies as st

from sitsim.cache import CacheEntry, MetadataCache


def entry(line: int) -> CacheEntry:
    return CacheEntry(("k", line), line * 64, None)


class ReferenceLru:
    """Plain per-set LRU used as an oracle."""

    def __init__(self, lines, ways):
        self.ways = ways
        self.sets = [OrderedDict() for _ in range(lines // ways)]

    def touch(self, line):
        s = self.sets[line % len(self.sets)]
        if line in s:
            s.move_to_end(line)
            return True, None
        victim = None
        if len(s) >= self.ways:
            victim, _ = s.popitem(last=False)
        s[line] = True
        return False, victim


@settings(max_examples=60)
@given(st.lists(st.integers(0, 40), max_size=300))
def test_matches_reference_lru(lines):
    cache = MetadataCache(16, 4)
    ref = ReferenceLru(16, 4)
    for line in lines:
        hit_ref, victim_ref = ref.touch(line)
        e = cache.access(("k", line))
        assert (e is not None) == hit_ref
        if e is None:
            victims = cache.insert(entry(line))
            assert [v.addr // 64 for v in victims] == ([] if victim_ref is None else [victim_ref])
    assert len(cache) == sum(len(s) for s in ref.sets)


def test_hit_ratio_and_counts():
    cache = MetadataCache(8, 2)
    assert cache.hit_ratio == 0.0
    cache.insert(entry(1))
    cache.access(("k", 1))
    cache.access(("k", 2))
    assert (cache.hits, cache.misses) == (1, 1)
    assert cache.hit_ratio == 0.5


def test_pinned_lines_are_never_victims():
    cache = MetadataCache(4, 2)        # two sets of two ways
    for line in (0, 2):
        cache.insert(entry(line))
        cache.pin(("k", line))
    assert cache.insert(entry(4)) == []        # set overfills instead
    assert len(cache) == 3
    victims = cache.unpin_all()
    assert [v.addr // 64 for v in victims] == [0]
    assert len(cache) == 2


def test_pigeonhole_more_lines_than_capacity_forces_evictions():
    cache = MetadataCache(8, 2)
    evicted = 0
    for line in range(9):
        evicted += len(cache.insert(entry(line)))
    assert len(cache) == 8 and evicted == 1


def test_double_insert_rejected():
    cache = MetadataCache(4, 2)
    cache.insert(entry(1))
    with pytest.raises(KeyError):
        cache.insert(entry(1))


def test_remove_and_geometry_check():
    cache = MetadataCache(4, 2)
    cache.insert(entry(3))
    assert cache.remove(("k", 3)).addr == 192
    assert cache.remove(("k", 3)) is None
    with pytest.raises(ValueError):
        MetadataCache(5, 2)
