from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from sitsim.crypto import Crypto, derive_key, gen_otp, mac, xor_cipher


def test_key_derivation_is_deterministic_and_seed_dependent():
    assert derive_key(1) == derive_key(1)
    assert derive_key(1) != derive_key(2)
    assert len(derive_key(0)) == 16


def test_mac_rejects_empty_input():
    with pytest.raises(ValueError):
        mac(derive_key(0), [])
    with pytest.raises(ValueError):
        Crypto.from_seed(0).mac()


def test_mac_parts_are_unambiguous():
    c = Crypto.from_seed(0)
    assert c.mac(b"ab", b"c") != c.mac(b"a", b"bc")
    assert c.mac(1) != c.mac(1, 0)


def test_crypto_methods_match_free_functions():
    c = Crypto.from_seed(5)
    assert c.mac(7, b"xy", 9) == mac(c.key, [7, b"xy", 9])
    assert c.otp(128, 3, 4) == gen_otp(c.key, 128, 3, 4)


def test_otp_rejects_unaligned_address():
    with pytest.raises(ValueError):
        Crypto.from_seed(0).otp(65, 0, 0)


def test_distinct_counters_give_distinct_pads():
    # 10^4 random (addr, major, minor) triples, no pad collisions
    c = Crypto.from_seed(3)
    rng = random.Random(0)
    triples = {(rng.randrange(1 << 28) * 64, rng.randrange(16), rng.randrange(128))
               for _ in range(10_000)}
    pads = {c.otp(*t) for t in triples}
    assert len(pads) == len(triples)


@given(st.binary(min_size=64, max_size=64), st.integers(0, 1 << 20), st.integers(0, 1000),
       st.integers(0, 127))
def test_xor_cipher_is_an_involution(block, blk_idx, major, minor):
    pad = Crypto.from_seed(1).otp(blk_idx * 64, major, minor)
    ct = xor_cipher(block, pad)
    assert xor_cipher(ct, pad) == block


def test_xor_cipher_checks_lengths():
    with pytest.raises(ValueError):
        xor_cipher(bytes(63), bytes(64))


@settings(max_examples=50)
@given(st.integers(0, 2**58), st.binary(min_size=0, max_size=80), st.integers(0, 2**64 - 1),
       st.integers(0, 2**64 - 1))
def test_tag_formulas_match_the_generic_encoding(addr, raw, a, b):
    from sitsim.macs import compute_node_hmac, data_mac
    c = Crypto.from_seed(3)
    assert data_mac(c, addr, raw, a, b) == c.mac(addr, raw, a, b)
    assert compute_node_hmac(c, addr, raw, a) == c.mac(addr, raw, a)
