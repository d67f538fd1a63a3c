"""Keyed hashing, one-time pads and the XOR cipher used by the controller.

blake2b in keyed mode stands in for both the MAC engine and the AES-based pad
generator. Nothing here charges latency; callers decide whether an invocation
sits on the critical path.
"""
from __future__ import annotations

import hashlib
from typing import Iterable, Union

KEY_BYTES = 16
PAD_BYTES = 64
BLOCK_BYTES = 64
MAC_BITS = 64

Part = Union[bytes, bytearray, memoryview, int]


def derive_key(seed: int) -> bytes:
    """Deterministic 16-byte key for a simulation run."""
    return hashlib.blake2b(b"sitsim-key" + seed.to_bytes(8, "little", signed=False),
                           digest_size=KEY_BYTES).digest()


_U64_PREFIX = (8).to_bytes(2, "little")


def _encode(parts: Iterable[Part]) -> bytes:
    # length-prefixed so that ("ab", "c") and ("a", "bc") never collide
    return b"".join([_U64_PREFIX + p.to_bytes(8, "little") if isinstance(p, int)
                     else len(p).to_bytes(2, "little") + bytes(p) for p in parts])


def mac(key: bytes, parts: Iterable[Part]) -> int:
    """64-bit keyed tag over an ordered list of byte strings / u64 integers."""
    raw = _encode(parts)
    if not raw:
        raise ValueError("mac needs at least one input part")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8, key=key).digest(), "little")


def gen_otp(key: bytes, addr: int, major: int, minor: int) -> bytes:
    if addr % BLOCK_BYTES:
        raise ValueError(f"unaligned address {addr:#x}")
    seed = b"otp" + addr.to_bytes(8, "little") + major.to_bytes(8, "little") \
        + minor.to_bytes(8, "little")
    return hashlib.blake2b(seed, digest_size=PAD_BYTES, key=key).digest()


def xor_cipher(block: bytes, pad: bytes) -> bytes:
    if len(block) != BLOCK_BYTES or len(pad) != PAD_BYTES:
        raise ValueError("xor_cipher operates on 64-byte blocks")
    x = int.from_bytes(block, "little") ^ int.from_bytes(pad, "little")
    return x.to_bytes(BLOCK_BYTES, "little")


class Crypto:
    """Binds a key to the primitives; this is what the simulator passes around."""

    __slots__ = ("key", "_mac0", "_otp0")

    def __init__(self, key: bytes):
        if len(key) != KEY_BYTES:
            raise ValueError("key must be 16 bytes")
        self.key = key
        # keyed states to clone; cheaper than re-keying for every call
        self._mac0 = hashlib.blake2b(digest_size=8, key=key)
        self._otp0 = hashlib.blake2b(digest_size=PAD_BYTES, key=key)

    @classmethod
    def from_seed(cls, seed: int) -> "Crypto":
        return cls(derive_key(seed))

    def mac(self, *parts: Part) -> int:
        raw = _encode(parts)
        if not raw:
            raise ValueError("mac needs at least one input part")
        h = self._mac0.copy()
        h.update(raw)
        return int.from_bytes(h.digest(), "little")

    def mac_raw(self, raw: bytes) -> int:
        """Tag over bytes that are already in the ``_encode`` layout."""
        h = self._mac0.copy()
        h.update(raw)
        return int.from_bytes(h.digest(), "little")

    def otp(self, addr: int, major: int, minor: int) -> bytes:
        if addr % BLOCK_BYTES:
            raise ValueError(f"unaligned address {addr:#x}")
        h = self._otp0.copy()
        h.update(b"otp" + addr.to_bytes(8, "little") + major.to_bytes(8, "little")
                 + minor.to_bytes(8, "little"))
        return h.digest()
