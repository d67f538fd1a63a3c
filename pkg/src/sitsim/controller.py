"""Secure memory controller: read/write datapaths, metadata cache, write queue.

The controller is a deterministic event machine. Each trace operation is one
event, each background branch job is one event, and a crash may be injected
at any boundary between events. Time advances by the critical-path latency
of every operation (closed-loop issue: the next request leaves the core when
the previous one completes).
"""
from __future__ import annotations

from typing import Callable, Optional, Tuple

from .cache import CacheEntry, MetadataCache
from .config import SimConfig
from .crypto import Crypto, xor_cipher
from .ledger import CycleLedger, RunReport
from .macs import data_mac
from .metadata import BLOCK, BLOCKS_PER_LEAF, LEAF_SPAN, check_block_addr, make_geometry
from .nvm import KIND_BMT, KIND_SIT, NvmImage
from .tree import IntegrityViolation, SitTree
from .wqueue import EntryKind, WriteQueue, WriteQueueEntry, octant_fn


class PowerFailure(Exception):
    def __init__(self, event: int):
        super().__init__(f"power lost at event boundary {event}")
        self.event = event


class OtpReuse(AssertionError):
    pass


class Controller:
    def __init__(self, cfg: SimConfig, crypto: Optional[Crypto] = None,
                 image: Optional[NvmImage] = None):
        self.cfg = cfg
        self.geo = make_geometry(cfg.mem_size)
        self.crypto = crypto or Crypto.from_seed(cfg.seed)
        kind = KIND_BMT if cfg.is_bmt else KIND_SIT
        if image is None:
            image = NvmImage(self.crypto, self.geo, cfg.minor_bits, kind)
        elif image.kind != kind or image.geo != self.geo or image.minor_bits != cfg.minor_bits:
            raise ValueError("image does not match the configuration")
        self.image = image
        self.ledger = CycleLedger()
        self.cache = MetadataCache(cfg.cache_lines, cfg.cache_ways)
        self._octant_of = octant_fn(self.geo)
        self.queue = WriteQueue(image, self._octant_of, cfg.wq_user, cfg.wq_meta,
                                cfg.nvm_write_cycles, cfg.tag_refill_cycles, cfg.nvm_write_banks)
        self.root = list(image.root.counters)
        if cfg.is_bmt:
            from .bmt import BmtTree
            self.tree = BmtTree(self)
        else:
            self.tree = SitTree(self)
        if self.tree.uses_prediction():
            self.queue.prefill_tags(0, self.root[0])
        self.now = 0
        self.events = 0
        self.crash_at: Optional[int] = None
        self.observer: Optional[Callable[[int, "Controller"], None]] = None
        self.writes = 0
        self.reads = 0
        self.overflows = 0
        self.persist_latencies = []     # per write: critical path plus the data block's array write
        self._background = False
        self._otp_seen = set() if cfg.check_otp_unique else None

    # -- plumbing used by the tree

    def time(self) -> int:
        return self.now + self.ledger.current

    def nvm_data(self, addr: int) -> Tuple[bytes, int]:
        e = self.queue.lookup(("data", addr))
        if e is not None:
            return e.payload
        return self.image.read_data(addr)

    def nvm_counter(self, leaf: int):
        e = self.queue.lookup(("counter", leaf))
        if e is not None:
            blk, mac = e.payload
            return blk.copy(), mac
        return self.image.read_counter(leaf)

    def nvm_node(self, level: int, index: int):
        e = self.queue.lookup(("node", level, index))
        if e is not None:
            return e.payload[0].copy()
        return self.image.read_node(level, index)

    def enqueue_meta(self, key: tuple, payload: tuple) -> None:
        stall = self.queue.enqueue(WriteQueueEntry(EntryKind.META, key, payload), self.time())
        if stall:
            if self._background:
                self.ledger.charge("stall.meta", stall)
            else:
                # metadata write-backs only hold up the request when their slots are full
                with self.ledger.onpath():
                    self.ledger.charge("stall.meta", stall)

    def cache_insert(self, entry: CacheEntry, pin: bool = False) -> None:
        victims = self.cache.insert(entry)
        if pin:
            self.cache.pin(entry.key)
        for v in victims:
            self.tree.writeback(v)

    def _release(self) -> None:
        while True:
            victims = self.cache.unpin_all()
            if not victims:
                return
            for v in victims:
                self.tree.writeback(v)

    # -- events

    def _boundary(self) -> None:
        if self.observer is not None:
            self.observer(self.events, self)
        if self.crash_at is not None and self.events >= self.crash_at:
            raise PowerFailure(self.events)

    def _event(self, fn, *args):
        self._boundary()
        out = fn(*args)
        self.events += 1
        return out

    def run(self, ops, crash_at: Optional[int] = None, observer=None, finish: bool = True) -> None:
        """Execute trace ops (objects with kind/addr/payload) as events."""
        self.crash_at = crash_at
        self.observer = observer
        direct = self.cfg.root_persist == "direct"
        if crash_at is None and observer is None and not direct:
            self._run_plain(ops)
            ops = ()
        for op in ops:
            if op.kind == "W":
                if direct:
                    ctx = self._event(self._write_begin, op.addr, op.payload)
                    self._event(self._write_end, ctx)
                else:
                    self._event(self.write, op.addr, op.payload)
            else:
                self._event(self.read, op.addr)
            for _ in range(self.cfg.bg_jobs_per_op):
                if not self.tree.has_jobs():
                    break
                self._event(self.background_step)
        if finish:
            self.finish()

    def _run_plain(self, ops) -> None:
        # same event sequence as run() with no boundary hooks to call
        tree = self.tree
        bg = self.cfg.bg_jobs_per_op
        write, read, step = self.write, self.read, self.background_step
        for op in ops:
            if op.kind == "W":
                write(op.addr, op.payload)
            else:
                read(op.addr)
            self.events += 1
            for _ in range(bg):
                if not tree.has_jobs():
                    break
                step()
                self.events += 1

    def finish(self) -> None:
        """Let the background updater catch up, then mark the final boundary."""
        while self.tree.has_jobs():
            self._event(self.background_step)
        self._boundary()

    def background_step(self) -> None:
        self._background = True
        try:
            with self.ledger.offpath():
                self.tree.run_next_job()
                self._release()
        finally:
            self._background = False

    # -- datapaths

    def write(self, addr: int, data: bytes) -> int:
        return self._write_end(self._write_begin(addr, data))

    def _write_begin(self, addr: int, data: bytes):
        check_block_addr(addr, self.geo.mem_size)
        if len(data) != BLOCK:
            raise ValueError("write payload must be 64 bytes")
        cfg = self.cfg
        led = self.ledger
        led.begin_op("write")
        leaf = addr // LEAF_SPAN
        slot = (addr // BLOCK) % BLOCKS_PER_LEAF
        e = self.cache.access((0, leaf))
        if e is None:
            e = self.tree.acquire_counter(leaf)
            led.charge("otp", cfg.otp_cycles)
        else:
            self.cache.pin(e.key)
        blk = e.obj
        if blk.minors[slot] + 1 < (1 << blk.minor_bits):
            blk.minors[slot] += 1
            old = None
            overflow = False
            delta = 1
        else:
            old = blk.copy()
            overflow = blk.increment_minor(slot)
            delta = blk.leaf_sum() - old.leaf_sum()
        e.dirty = True
        e.stale = True
        major, minor = blk.major, blk.minors[slot]
        self._note_pad(addr, major, minor)
        ct = xor_cipher(data, self.crypto.otp(addr, major, minor))
        mac = data_mac(self.crypto, addr, ct, major, minor)
        led.charge("hash.data", cfg.hash_cycles)
        self.tree.update(leaf, e, delta)
        o = self._octant_of(addr)
        if overflow:
            self.overflows += 1
            self.queue.invalidate_prediction()
        if cfg.root_persist == "direct":
            self.image.root.counters[o] = self.root[o]
        return addr, leaf, slot, o, e, ct, mac, old

    def _write_end(self, ctx) -> int:
        addr, leaf, slot, o, e, ct, mac, old = ctx
        cfg = self.cfg
        led = self.ledger
        tag, refill = self.tree.tag_for(o)
        if refill:
            led.charge("stall.tag", refill)
        stall = self.queue.enqueue(WriteQueueEntry(EntryKind.USER, ("data", addr), (ct, mac), tag),
                                   self.time())
        if stall:
            led.charge("stall.user", stall)
        if old is not None:
            self._overflow_resync(leaf, slot, old, e)
        elif cfg.osiris_stop_loss and e.persisted is not None:
            if e.obj.minors[slot] - e.persisted[slot] >= cfg.osiris_limit:
                self.persist_counter(e)
        self._release()
        self.writes += 1
        lat = led.end_op()
        self.now += lat
        # the write completes when its data block has been written into the NVM array;
        # waiting behind other queued writes only counts when it blocked the request (stall.user)
        self.persist_latencies.append(lat + cfg.nvm_write_cycles)
        return lat

    def persist_counter(self, e: CacheEntry) -> None:
        """Write a cached counter block through so recovery never needs to look far ahead."""
        with self.ledger.offpath():
            mac = self.tree.persist_mac(e)
            self.enqueue_meta(("counter", e.key[1]), (e.obj.copy(), mac))
        e.persisted = list(e.obj.minors)
        e.dirty = False

    def _overflow_resync(self, leaf: int, slot: int, old, e: CacheEntry) -> None:
        """Re-encrypt the region's other blocks under the new major counter.

        The tree already absorbed the sum change (new_sum - old_sum) through
        the scheme update, so only the data side is left.
        """
        cfg = self.cfg
        blk = e.obj
        o = self._octant_of(leaf * LEAF_SPAN)
        with self.ledger.offpath():
            for j in range(BLOCKS_PER_LEAF):
                if j == slot:
                    continue
                a = leaf * LEAF_SPAN + j * BLOCK
                ct, mac = self.nvm_data(a)
                self.ledger.charge("read.data", cfg.nvm_read_cycles)
                self.ledger.charge("hash.verify", cfg.hash_cycles)
                if mac != data_mac(self.crypto, a, ct, old.major, old.minors[j]):
                    raise IntegrityViolation(-1, a)
                pt = xor_cipher(ct, self.crypto.otp(a, old.major, old.minors[j]))
                self._note_pad(a, blk.major, 0)
                new_ct = xor_cipher(pt, self.crypto.otp(a, blk.major, 0))
                new_mac = data_mac(self.crypto, a, new_ct, blk.major, 0)
                self.ledger.charge("otp", 2 * cfg.otp_cycles, n=2)
                self.ledger.charge("hash.data", cfg.hash_cycles)
                tag = None if cfg.root_persist == "direct" else self.root[o]
                stall = self.queue.enqueue(
                    WriteQueueEntry(EntryKind.USER, ("data", a), (new_ct, new_mac), tag), self.time())
                if stall:
                    self.ledger.charge("stall.user", stall)
        self.persist_counter(e)

    def _note_pad(self, addr: int, major: int, minor: int) -> None:
        if self._otp_seen is None:
            return
        key = (addr, major, minor)
        if key in self._otp_seen:
            raise OtpReuse(f"pad reused for {addr:#x} counter ({major}, {minor})")
        self._otp_seen.add(key)

    def read(self, addr: int) -> bytes:
        check_block_addr(addr, self.geo.mem_size)
        cfg = self.cfg
        led = self.ledger
        led.begin_op("read")
        leaf = addr // LEAF_SPAN
        slot = (addr // BLOCK) % BLOCKS_PER_LEAF
        e = self.cache.access((0, leaf))
        hit = e is not None and e.verified
        if hit:
            self.cache.pin(e.key)
        else:
            e = self.tree.prepare_read(leaf, e)
        chain = led.current
        blk = e.obj
        major, minor = blk.major, blk.minors[slot]
        fwd = self.queue.lookup(("data", addr))
        if fwd is not None:
            # forwarded from the on-chip queue: no NVM access, no MAC check
            ct, mac = fwd.payload
            led.charge("otp", cfg.otp_cycles)
        else:
            ct, mac = self.image.read_data(addr)
            if hit:
                led.charge("read.data", max(cfg.nvm_read_cycles, cfg.otp_cycles))
            else:
                led.charge("otp", cfg.otp_cycles)
                led.charge("read.data", max(0, cfg.nvm_read_cycles - chain - cfg.otp_cycles))
            led.charge("hash.data_verify", cfg.hash_cycles)
            if mac != data_mac(self.crypto, addr, ct, major, minor):
                raise IntegrityViolation(-1, addr)
        pt = xor_cipher(ct, self.crypto.otp(addr, major, minor))
        self._release()
        self.reads += 1
        self.now += led.end_op()
        return pt

    # -- persistence

    def persistent_state(self) -> NvmImage:
        """What NVM would hold if power failed now (queue drained by ADR), without disturbing the run."""
        img = self.image.copy()
        self.queue.apply_to(img)
        return img

    def drain_on_crash(self) -> NvmImage:
        """ADR flush; volatile cache contents and pending branch jobs are lost."""
        self.queue.drain_all()
        self.cache = None
        return self.image

    def shutdown(self) -> NvmImage:
        """Orderly power-down: finish jobs, write back every dirty line, drain the queue."""
        while self.tree.has_jobs():
            self.background_step()
        with self.ledger.offpath():
            for level in range(self.geo.top + 1):
                for e in [x for x in self.cache.entries() if x.key[0] == level and x.dirty]:
                    if self.cache.peek(e.key) is e:
                        self.cache.remove(e.key)
                        self.tree.writeback(e)
            self._release()
        self.queue.drain_all()
        return self.image

    def octant_sums(self):
        """Per-octant sum of the current (volatile) counter blocks, for invariant checks."""
        sums = [0] * 8
        leaves = {}
        for leaf, blk in self.image.counters.items():
            leaves[leaf] = blk
        for e in self.queue.entries:
            if e.key[0] == "counter":
                leaves[e.key[1]] = e.payload[0]
        for e in self.cache.entries():
            if e.key[0] == 0:
                leaves[e.key[1]] = e.obj
        for leaf, blk in leaves.items():
            sums[self.geo.octant_of_leaf(leaf)] += blk.leaf_sum()
        return sums

    # -- reporting

    def report(self) -> RunReport:
        led = self.ledger
        w = self.persist_latencies
        r = led.latencies("read")
        q = self.queue
        total_w = q.user_writes + q.meta_writes
        stalls = q.stalls["user"] + q.stalls["meta"] + q.refills
        return RunReport(
            scheme=self.cfg.scheme,
            ops=len(led.ops),
            writes=len(w),
            reads=len(r),
            total_cycles=led.total_cycles,
            avg_write_latency_cycles=round(sum(w) / len(w), 6) if w else 0.0,
            avg_read_latency_cycles=round(sum(r) / len(r), 6) if r else 0.0,
            metadata_cache_hit_ratio=round(self.cache.hit_ratio, 6),
            metadata_write_fraction=round(q.meta_writes / total_w, 6) if total_w else 0.0,
            hash_count=led.count("hash."),
            critical_hash_count=led.count("hash.", offpath=False),
            tree_node_reads=led.count("read.tree", offpath=False),
            stalls=stalls,
            stall_cycles=led.cycles_of("stall.") + led.cycles_of("stall.", offpath=True),
            final_root=list(self.root),
        )

