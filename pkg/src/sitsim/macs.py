"""The three tag formulas stored in NVM.

data MAC   mac(addr, ciphertext, major, minor)
node HMAC  mac(node addr, node counters, parent counter)   (counter blocks too)
digest     mac(node bytes)                                  (BMT only)
"""
from __future__ import annotations

from .crypto import Crypto
from .metadata import CounterBlock, SitNode

# the formulas below are hot; they lay out their parts exactly as Crypto.mac would
_U64 = (8).to_bytes(2, "little")
_LEN64 = (64).to_bytes(2, "little")


def data_mac(crypto: Crypto, addr: int, ct: bytes, major: int, minor: int) -> int:
    if len(ct) != 64:
        return crypto.mac(addr, ct, major, minor)
    return crypto.mac_raw(b"".join((_U64, addr.to_bytes(8, "little"), _LEN64, ct,
                                    _U64, major.to_bytes(8, "little"),
                                    _U64, minor.to_bytes(8, "little"))))


def compute_node_hmac(crypto: Crypto, node_addr: int, counters: bytes, parent_counter: int) -> int:
    """``counters`` is the serialized counter area of a SIT node or counter block."""
    return crypto.mac_raw(b"".join((_U64, node_addr.to_bytes(8, "little"),
                                    len(counters).to_bytes(2, "little"), counters,
                                    _U64, parent_counter.to_bytes(8, "little"))))


def leaf_hmac(crypto: Crypto, leaf_addr: int, block: CounterBlock, parent_counter: int) -> int:
    return compute_node_hmac(crypto, leaf_addr, block.encode(), parent_counter)


def sit_hmac(crypto: Crypto, node_addr: int, node: SitNode, parent_counter: int) -> int:
    return compute_node_hmac(crypto, node_addr, node.counter_bytes(), parent_counter)


def digest(crypto: Crypto, raw: bytes) -> int:
    return crypto.mac(raw)
