from __future__ import annotations

import pytest

from sitsim.config import SimConfig
from sitsim.controller import Controller
from sitsim.failure import recover
from sitsim.ledger import CycleLedger
from sitsim.nvm import ImageFormatError, NvmImage
from sitsim.workloads import gen_trace

from conftest import SMALL


@pytest.fixture(scope="module")
def image():
    ctl = Controller(SimConfig(mem_size=SMALL, cache_kib=4))
    ctl.run(gen_trace("rbtree", 300, 1, SMALL).ops)
    return ctl.shutdown(), ctl


@pytest.mark.parametrize("scheme", ["scue", "bmt-eager"])
def test_serialize_round_trip(scheme):
    cfg = SimConfig(mem_size=SMALL, cache_kib=4, scheme=scheme)
    ctl = Controller(cfg)
    ctl.run(gen_trace("hash", 200, 2, SMALL).ops)
    img = ctl.shutdown()
    raw = img.serialize(cfg.digest())
    back, digest = NvmImage.deserialize(raw, ctl.crypto)
    assert digest == cfg.digest()
    assert back.content_equal(img)
    assert back.serialize(digest) == raw
    assert recover(back, limit=cfg.osiris_limit).clean


def test_corrupt_images_rejected(image):
    img, ctl = image
    raw = img.serialize()
    for bad in (b"", b"\x63" + raw[1:], raw[:-3], raw + b"\x00"):
        with pytest.raises(ImageFormatError):
            NvmImage.deserialize(bad, ctl.crypto)


def test_copy_is_independent(image):
    img, _ = image
    dup = img.copy()
    leaf = next(iter(dup.counters))
    dup.counters[leaf].major += 1
    dup.root.counters[0] += 1
    assert not dup.content_equal(img)


def test_unwritten_memory_reads_as_boot_state(image):
    img, _ = image
    blk, mac = img.read_counter(img.geo.leaf_count - 1)
    assert blk.major == 0 and not any(blk.minors)
    assert mac == img.pristine_leaf_mac(img.geo.leaf_count - 1)


def test_ledger_offpath_is_nestable_and_onpath_overrides():
    led = CycleLedger()
    led.begin_op("write")
    led.charge("a", 10)
    with led.offpath():
        led.charge("b", 5)
        with led.offpath():
            with led.onpath():
                led.charge("c", 7)
            led.charge("b", 1)
    assert led.end_op() == 17
    assert led.off_cycles["b"] == 6 and led.cycles["c"] == 7
    assert led.count("b") == 2 and led.count("b", offpath=False) == 0
