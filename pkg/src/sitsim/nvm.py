"""Sparse persistent memory image.

Only locations that were ever written are stored. Everything else reads back
as the boot-formatted value: zero plaintext encrypted under counter (0, 0),
all-zero counter blocks and SIT nodes with tags computed for a zero parent
counter, and the all-zero BMT fold. The key is never stored; loading an image
requires the caller's Crypto.
"""
from __future__ import annotations

import struct
from typing import Dict, Iterable, Set, Tuple

from .crypto import Crypto, xor_cipher
from .macs import data_mac, leaf_hmac, sit_hmac
from .metadata import (BLOCK, FANOUT, LEAF_SPAN, BmtNode, CounterBlock,
                       RootRegister, SitNode, TreeGeometry)

IMAGE_VERSION = 1
KIND_SIT = 0
KIND_BMT = 1
_ZERO = bytes(BLOCK)


class ImageFormatError(ValueError):
    pass


class NvmImage:
    def __init__(self, crypto: Crypto, geometry: TreeGeometry, minor_bits: int = 7,
                 kind: int = KIND_SIT):
        self.crypto = crypto
        self.geo = geometry
        self.minor_bits = minor_bits
        self.kind = kind
        self.data: Dict[int, bytes] = {}
        self.data_macs: Dict[int, int] = {}
        self.counters: Dict[int, CounterBlock] = {}
        self.leaf_macs: Dict[int, int] = {}
        self.nodes: Dict[Tuple[int, int], object] = {}
        self.root = RootRegister()
        self._bmt_pristine = None
        if kind == KIND_BMT:
            self.root = RootRegister([self.bmt_pristine()[geometry.top][1]] * FANOUT)

    # -- boot-formatted contents

    def pristine_data(self, addr: int) -> Tuple[bytes, int]:
        ct = xor_cipher(_ZERO, self.crypto.otp(addr, 0, 0))
        return ct, data_mac(self.crypto, addr, ct, 0, 0)

    def pristine_leaf_mac(self, leaf: int) -> int:
        if self.kind == KIND_BMT:
            return 0
        return leaf_hmac(self.crypto, self.geo.node_addr(0, leaf),
                         CounterBlock(minor_bits=self.minor_bits), 0)

    def pristine_node(self, level: int, index: int):
        if self.kind == KIND_BMT:
            return self.bmt_pristine()[level][0].copy()
        addr = self.geo.node_addr(level, index)
        node = SitNode()
        node.hmac = sit_hmac(self.crypto, addr, node, 0)
        return node

    def bmt_pristine(self):
        """Per level: (pristine BmtNode, its digest); level 0 holds (None, leaf digest)."""
        if self._bmt_pristine is None:
            from .bmt import pristine_levels
            self._bmt_pristine = pristine_levels(self.crypto, self.geo, self.minor_bits)
        return self._bmt_pristine

    # -- accessors (reads return private copies)

    def read_data(self, addr: int) -> Tuple[bytes, int]:
        ct = self.data.get(addr)
        mac = self.data_macs.get(addr)
        if ct is None or mac is None:
            p_ct, p_mac = self.pristine_data(addr)
            ct = p_ct if ct is None else ct
            mac = p_mac if mac is None else mac
        return ct, mac

    def write_data(self, addr: int, ct: bytes, mac: int) -> None:
        self.data[addr] = ct
        self.data_macs[addr] = mac

    def read_counter(self, leaf: int) -> Tuple[CounterBlock, int]:
        blk = self.counters.get(leaf)
        if blk is None:
            blk = CounterBlock(minor_bits=self.minor_bits)
        else:
            blk = blk.copy()
        mac = self.leaf_macs.get(leaf)
        if mac is None:
            mac = self.pristine_leaf_mac(leaf)
        return blk, mac

    def write_counter(self, leaf: int, block: CounterBlock, mac: int) -> None:
        self.counters[leaf] = block.copy()
        self.leaf_macs[leaf] = mac

    def read_node(self, level: int, index: int):
        node = self.nodes.get((level, index))
        if node is None:
            return self.pristine_node(level, index)
        return node.copy()

    def write_node(self, level: int, index: int, node) -> None:
        self.nodes[(level, index)] = node.copy()

    # -- bookkeeping

    def copy(self) -> "NvmImage":
        other = NvmImage.__new__(NvmImage)
        other.crypto = self.crypto
        other.geo = self.geo
        other.minor_bits = self.minor_bits
        other.kind = self.kind
        other.data = dict(self.data)
        other.data_macs = dict(self.data_macs)
        other.counters = {k: v.copy() for k, v in self.counters.items()}
        other.leaf_macs = dict(self.leaf_macs)
        other.nodes = {k: v.copy() for k, v in self.nodes.items()}
        other.root = self.root.copy()
        other._bmt_pristine = self._bmt_pristine
        return other

    def touched_leaves(self) -> Set[int]:
        leaves = set(self.counters) | set(self.leaf_macs)
        leaves.update(a // LEAF_SPAN for a in self.data)
        leaves.update(a // LEAF_SPAN for a in self.data_macs)
        return leaves

    def region_addrs(self, leaf: int) -> Iterable[int]:
        base = leaf * LEAF_SPAN
        return range(base, base + LEAF_SPAN, BLOCK)

    def stored_region(self, leaf: int):
        """Everything stored for one 4 KiB region, for snapshots and replays."""
        addrs = [a for a in self.region_addrs(leaf) if a in self.data or a in self.data_macs]
        return {
            "counter": self.counters.get(leaf),
            "leaf_mac": self.leaf_macs.get(leaf),
            "data": {a: (self.data.get(a), self.data_macs.get(a)) for a in addrs},
        }

    def restore_region(self, leaf: int, region) -> None:
        for a in self.region_addrs(leaf):
            self.data.pop(a, None)
            self.data_macs.pop(a, None)
        self.counters.pop(leaf, None)
        self.leaf_macs.pop(leaf, None)
        if region["counter"] is not None:
            self.counters[leaf] = region["counter"].copy()
        if region["leaf_mac"] is not None:
            self.leaf_macs[leaf] = region["leaf_mac"]
        for a, (ct, mac) in region["data"].items():
            if ct is not None:
                self.data[a] = ct
            if mac is not None:
                self.data_macs[a] = mac

    def content_equal(self, other: "NvmImage") -> bool:
        return (self.data == other.data and self.data_macs == other.data_macs
                and self.counters == other.counters and self.leaf_macs == other.leaf_macs
                and self.nodes == other.nodes and self.root == other.root)

    # -- binary form

    def serialize(self, config_digest: bytes = bytes(32)) -> bytes:
        """version ‖ header ‖ data ‖ counters ‖ tree ‖ MAC table ‖ root."""
        if len(config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        out = [bytes([IMAGE_VERSION]),
               struct.pack("<BBQ", self.kind, self.minor_bits, self.geo.mem_size),
               config_digest]
        out.append(struct.pack("<Q", len(self.data)))
        for a in sorted(self.data):
            out.append(struct.pack("<Q", a) + self.data[a])
        out.append(struct.pack("<Q", len(self.counters)))
        for leaf in sorted(self.counters):
            out.append(struct.pack("<Q", leaf) + self.counters[leaf].encode())
        out.append(struct.pack("<Q", len(self.nodes)))
        for (lvl, idx) in sorted(self.nodes):
            out.append(struct.pack("<BQ", lvl, idx) + self.nodes[(lvl, idx)].encode())
        out.append(struct.pack("<Q", len(self.data_macs)))
        for a in sorted(self.data_macs):
            out.append(struct.pack("<QQ", a, self.data_macs[a]))
        out.append(struct.pack("<Q", len(self.leaf_macs)))
        for leaf in sorted(self.leaf_macs):
            out.append(struct.pack("<QQ", leaf, self.leaf_macs[leaf]))
        out.append(struct.pack("<8Q", *self.root.counters))
        return b"".join(out)

    @classmethod
    def deserialize(cls, raw: bytes, crypto: Crypto) -> Tuple["NvmImage", bytes]:
        """Returns (image, config digest from the header)."""
        from .metadata import make_geometry
        if not raw or raw[0] != IMAGE_VERSION:
            raise ImageFormatError(f"unsupported image version {raw[:1]!r}")
        try:
            pos = 1
            kind, minor_bits, mem_size = struct.unpack_from("<BBQ", raw, pos)
            pos += 10
            digest = raw[pos:pos + 32]
            pos += 32
            img = cls(crypto, make_geometry(mem_size), minor_bits, kind)

            def count():
                nonlocal pos
                (n,) = struct.unpack_from("<Q", raw, pos)
                pos += 8
                return n

            for _ in range(count()):
                (a,) = struct.unpack_from("<Q", raw, pos)
                img.data[a] = raw[pos + 8:pos + 8 + BLOCK]
                pos += 8 + BLOCK
            csize = CounterBlock(minor_bits=minor_bits).encoded_size
            for _ in range(count()):
                (leaf,) = struct.unpack_from("<Q", raw, pos)
                img.counters[leaf] = CounterBlock.decode(raw[pos + 8:pos + 8 + csize], minor_bits)
                pos += 8 + csize
            node_cls = BmtNode if kind == KIND_BMT else SitNode
            for _ in range(count()):
                lvl, idx = struct.unpack_from("<BQ", raw, pos)
                img.nodes[(lvl, idx)] = node_cls.decode(raw[pos + 9:pos + 9 + BLOCK])
                pos += 9 + BLOCK
            for _ in range(count()):
                a, m = struct.unpack_from("<QQ", raw, pos)
                img.data_macs[a] = m
                pos += 16
            for _ in range(count()):
                leaf, m = struct.unpack_from("<QQ", raw, pos)
                img.leaf_macs[leaf] = m
                pos += 16
            img.root = RootRegister(list(struct.unpack_from("<8Q", raw, pos)))
            pos += 64
        except (struct.error, ValueError) as exc:
            raise ImageFormatError(f"truncated or corrupt image: {exc}") from None
        if pos != len(raw):
            raise ImageFormatError("trailing bytes after root register")
        return img, digest

