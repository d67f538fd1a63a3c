from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from sitsim.metadata import (AddressError, BmtNode, CounterBlock, SitNode, check_block_addr,
                             dummy_counter, layout, leaf_sum, make_geometry)


def test_increment_without_overflow():
    b = CounterBlock()
    assert b.increment_minor(5) is False
    assert b.minors[5] == 1 and b.major == 0
    assert leaf_sum(b) == 1


def test_overflow_bumps_major_and_resets_every_minor():
    b = CounterBlock(minors=[3] * 64)
    b.minors[9] = 127
    assert b.increment_minor(9) is True
    assert b.major == 1
    assert b.minors == [0] * 64


def test_leaf_sum_tracks_increments():
    b = CounterBlock()
    for i in range(500):
        b.increment_minor(i % 64)
    # 500 increments spread over 64 slots never reach 128 in one slot
    assert b.major == 0
    assert leaf_sum(b) == 500


def test_leaf_sum_after_overflow_is_major_plus_minors():
    b = CounterBlock()
    for _ in range(128):
        b.increment_minor(0)
    assert (b.major, b.minors[0]) == (1, 0)
    assert leaf_sum(b) == 1


@given(st.integers(0, (1 << 64) - 1), st.lists(st.integers(0, 127), min_size=64, max_size=64))
def test_counter_block_round_trip(major, minors):
    b = CounterBlock(major, minors)
    raw = b.encode()
    assert len(raw) == 8 + 56
    assert CounterBlock.decode(raw) == b


@given(st.integers(1, 12), st.data())
def test_counter_block_round_trip_any_width(bits, data):
    minors = data.draw(st.lists(st.integers(0, (1 << bits) - 1), min_size=64, max_size=64))
    b = CounterBlock(7, minors, minor_bits=bits)
    assert CounterBlock.decode(b.encode(), bits) == b
    assert len(b.encode()) == b.encoded_size


@given(st.lists(st.integers(0, (1 << 56) - 1), min_size=8, max_size=8), st.integers(0, (1 << 64) - 1))
def test_sit_node_round_trip(counters, hmac):
    n = SitNode(counters, hmac)
    raw = n.encode()
    assert len(raw) == 64
    assert SitNode.decode(raw) == n
    assert raw[:56] == n.counter_bytes()


def test_sit_counter_width_is_enforced():
    with pytest.raises(OverflowError):
        SitNode([1 << 56] + [0] * 7).encode()


def test_dummy_counter_is_the_counter_sum():
    assert dummy_counter(SitNode([1, 2, 3, 4, 5, 6, 7, 8])) == 36


@given(st.lists(st.integers(0, (1 << 64) - 1), min_size=8, max_size=8))
def test_bmt_node_round_trip(hmacs):
    assert BmtNode.decode(BmtNode(hmacs).encode()) == BmtNode(hmacs)


def test_default_geometry_has_nine_levels():
    geo = make_geometry(16 << 30)
    assert geo.leaf_count == 1 << 22
    assert geo.levels == 9            # counter blocks, seven SIT levels, root
    assert geo.nodes_at(geo.top) == 8
    assert geo.octant_leaves == 1 << 19


@pytest.mark.parametrize("mem", [1 << 16, 1 << 20, 1 << 24, 16 << 30])
def test_levels_partition_the_leaves(mem):
    geo = make_geometry(mem)
    assert geo.nodes_at(geo.top) == 8
    for lvl in range(1, geo.top + 1):
        assert 2 <= geo.level_fanout(lvl) <= 8
        assert geo.nodes_at(lvl) * geo.level_fanout(lvl) == geo.nodes_at(lvl - 1)


def test_octants_split_memory_in_eight_contiguous_ranges():
    geo = make_geometry(1 << 20)
    per = geo.leaf_count // 8
    for leaf in range(geo.leaf_count):
        assert geo.octant_of_leaf(leaf) == leaf // per
    for lvl in range(1, geo.top + 1):
        for idx in range(geo.nodes_at(lvl)):
            assert geo.octant_of_node(lvl, idx) == (idx << geo.shifts[lvl]) // per


def test_node_addresses_do_not_overlap():
    geo = make_geometry(1 << 20)
    addrs = [geo.node_addr(0, i) for i in range(geo.leaf_count)]
    for lvl in range(1, geo.top + 1):
        addrs += [geo.node_addr(lvl, i) for i in range(geo.nodes_at(lvl))]
    assert len(set(addrs)) == len(addrs)
    assert min(addrs) >= geo.mem_size
    assert max(addrs) < geo.end


def test_layout():
    geo = make_geometry(1 << 20)
    leaf, branch, octant = layout(0x9_1040, geo)
    assert leaf == 0x91
    assert len(branch) == geo.top
    assert octant == 0x91 // 32
    with pytest.raises(AddressError):
        layout(1 << 20, geo)


@pytest.mark.parametrize("mem", [0, 1 << 15, 3 << 20, 4097])
def test_bad_memory_sizes(mem):
    with pytest.raises(ValueError):
        make_geometry(mem)


def test_check_block_addr():
    check_block_addr(64, 1 << 20)
    with pytest.raises(AddressError):
        check_block_addr(65, 1 << 20)
    with pytest.raises(AddressError):
        check_block_addr(1 << 20, 1 << 20)
