"""Write-back, write-allocate LRU cache simulator over a sparse NVM image.

The engine intercepts every load/store issued by a workload, keeps the
freshest bytes in a volatile cache, and updates the NVM image only on
eviction of a dirty line or an explicit line flush.  A crash discards the
cache (it stays inspectable for verification) and hands back a deep
snapshot of the NVM image, which is all a recovery procedure may use.
"""

from collections import OrderedDict
from dataclasses import dataclass, fields

from .errors import CrashedEngine, OutOfArena

_TRIGGER_NEVER = 0
_TRIGGER_OP_COUNT = 1
_TRIGGER_LABEL = 2


@dataclass(frozen=True)
class CacheConfig:
    """Geometry of the simulated cache.

    associativity == 0 means fully associative.  capacity must be a
    multiple of line_size (and of line_size * associativity when
    set-associative).  line_size must be a power of two >= 8 so an
    8-byte scalar always fits one line when aligned.
    """

    capacity: int
    line_size: int = 64
    associativity: int = 0

    def __post_init__(self):
        ls = self.line_size
        if ls < 8 or ls & (ls - 1):
            raise ValueError("line_size must be a power of two >= 8")
        if self.capacity <= 0 or self.capacity % ls:
            raise ValueError("capacity must be a positive multiple of line_size")
        if self.associativity < 0:
            raise ValueError("associativity must be >= 0 (0 = fully associative)")
        if self.associativity and self.capacity % (ls * self.associativity):
            raise ValueError("capacity must be a multiple of line_size * associativity")

    @property
    def num_lines(self):
        return self.capacity // self.line_size

    @property
    def num_sets(self):
        if self.associativity == 0:
            return 1
        return self.num_lines // self.associativity

    def to_dict(self):
        return {
            "capacity": self.capacity,
            "line_size": self.line_size,
            "associativity": self.associativity,
        }


@dataclass(frozen=True)
class CrashPlan:
    """When a planned crash fires.

    kind "never": no planned crash.
    kind "after_op_count": fire just before the (n+1)-th memory operation
        (loads + stores), so n == 0 fires before the first one.
    kind "at_label": fire when maybe_fire_crash(label) is reached for the
        occurrence-th time.
    """

    kind: str = "never"
    op_count: int = 0
    label: str = ""
    occurrence: int = 1

    @staticmethod
    def never():
        return CrashPlan("never")

    @staticmethod
    def after_op_count(n):
        if n < 0:
            raise ValueError("op count must be >= 0")
        return CrashPlan("after_op_count", op_count=n)

    @staticmethod
    def at_label(label, occurrence=1):
        if occurrence < 1:
            raise ValueError("occurrence must be >= 1")
        return CrashPlan("at_label", label=label, occurrence=occurrence)


@dataclass(slots=True)
class EventCounters:
    """Monotonic event counts for one engine run."""

    loads: int = 0
    stores: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    writebacks: int = 0
    flush_ops: int = 0
    flushed_dirty: int = 0
    flushed_clean_or_absent: int = 0
    memcpy_bytes: int = 0

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return EventCounters(**self.to_dict())


@dataclass
class CacheLineEntry:
    """Read-only view of one resident cache line."""

    line_address: int
    dirty: bool
    data: bytes
    lru_stamp: int


class NvmImage:
    """Sparse byte-addressable persistent image; unwritten bytes read as zero.

    Backed by line_size-sized blocks.  Only write-backs, flushes and the
    persist-initialize path mutate it; program stores never do.
    """

    def __init__(self, line_size):
        self.line_size = line_size
        self._lines = {}

    def read(self, addr, length):
        ls = self.line_size
        lines = self._lines
        out = bytearray(length)
        pos = 0
        while pos < length:
            a = addr + pos
            base = a - (a % ls)
            off = a - base
            take = min(ls - off, length - pos)
            blk = lines.get(base)
            if blk is not None:
                out[pos:pos + take] = blk[off:off + take]
            pos += take
        return bytes(out)

    def write(self, addr, data):
        ls = self.line_size
        lines = self._lines
        length = len(data)
        pos = 0
        while pos < length:
            a = addr + pos
            base = a - (a % ls)
            off = a - base
            take = min(ls - off, length - pos)
            blk = lines.get(base)
            if blk is None:
                blk = bytearray(ls)
                lines[base] = blk
            blk[off:off + take] = data[pos:pos + take]
            pos += take

    def write_line(self, base, data):
        self._lines[base] = bytearray(data)

    def snapshot(self):
        img = NvmImage(self.line_size)
        img._lines = {k: bytearray(v) for k, v in self._lines.items()}
        return img

    def canonical(self):
        """Dict of line base -> bytes with all-zero lines dropped."""
        zero = bytes(self.line_size)
        return {k: bytes(v) for k, v in sorted(self._lines.items()) if bytes(v) != zero}

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.canonical().items()):
            h.update(k.to_bytes(8, "little"))
            h.update(v)
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, NvmImage):
            return NotImplemented
        return self.line_size == other.line_size and self.canonical() == other.canonical()


class CrashFired(Exception):
    """Raised inside a workload when the crash plan triggers.

    Carries the NVM snapshot; workload drivers catch it and unwind to the
    harness.
    """

    def __init__(self, snapshot):
        super().__init__("planned crash fired")
        self.snapshot = snapshot


class SimEngine:
    """Single-threaded cache+NVM engine.  Not safe for shared mutation."""

    def __init__(self, config, crash_plan=None):
        self.config = config
        self.nvm = NvmImage(config.line_size)
        self.counters = EventCounters()
        self.crashed = False

        ls = config.line_size
        self._ls = ls
        self._shift = ls.bit_length() - 1
        self._offset_mask = ls - 1
        self._num_sets = config.num_sets
        self._ways = config.associativity or config.num_lines
        # one OrderedDict per set: line base -> [dirty, bytearray, stamp]
        self._sets = [OrderedDict() for _ in range(self._num_sets)]
        self._set0 = self._sets[0]
        self._stamp = 0
        self._frontier = 0  # exclusive end of the mapped arena region
        self._mem_ops = 0
        self._label_counts = {}
        self._arm_base = 0
        self.set_crash_plan(crash_plan or CrashPlan.never())

    def set_crash_plan(self, plan):
        """Arm a crash plan; op counts and label occurrences start from here."""
        self.crash_plan = plan
        self._label_counts = {}
        self._arm_base = self._mem_ops
        if plan.kind == "never":
            self._trigger = _TRIGGER_NEVER
        elif plan.kind == "after_op_count":
            self._trigger = _TRIGGER_OP_COUNT
        elif plan.kind == "at_label":
            self._trigger = _TRIGGER_LABEL
        else:
            raise ValueError(f"unknown crash plan kind {plan.kind!r}")

    # -- arena bookkeeping -------------------------------------------------

    def map_frontier(self, end):
        """Extend the mapped address region to [0, end)."""
        if end > self._frontier:
            self._frontier = end

    @property
    def mapped_bytes(self):
        return self._frontier

    # -- crash machinery ----------------------------------------------------

    def _fire_crash(self):
        self.crashed = True
        raise CrashFired(self.nvm.snapshot())

    def maybe_fire_crash(self, label=None):
        """Fire the planned crash if its trigger condition is met."""
        if self.crashed:
            return
        t = self._trigger
        if t == _TRIGGER_LABEL and label is not None:
            plan = self.crash_plan
            if label == plan.label:
                c = self._label_counts.get(label, 0) + 1
                self._label_counts[label] = c
                if c >= plan.occurrence:
                    self._fire_crash()
        elif t == _TRIGGER_OP_COUNT and self._mem_ops - self._arm_base >= self.crash_plan.op_count:
            self._fire_crash()

    def crash(self):
        """Mark the engine crashed and return a deep NVM snapshot.

        Cache contents are not merged in; they stay visible through
        inspect_cache for verification.
        """
        self.crashed = True
        return self.nvm.snapshot()

    # -- memory operations ----------------------------------------------------

    def _line_fill(self, cache, base):
        # miss path: allocate from NVM, evicting the set's LRU victim
        c = self.counters
        c.misses += 1
        if len(cache) >= self._ways:
            vbase, ventry = cache.popitem(last=False)
            c.evictions += 1
            if ventry[0]:
                self.nvm.write_line(vbase, ventry[1])
                c.writebacks += 1
        blk = self.nvm._lines.get(base)
        data = bytearray(blk) if blk is not None else bytearray(self._ls)
        self._stamp += 1
        entry = [False, data, self._stamp]
        cache[base] = entry
        return entry

    def read(self, addr, length):
        """Return the freshest `length` bytes at addr (span <= 2 lines)."""
        if self.crashed:
            raise CrashedEngine("read after crash")
        if self._trigger == _TRIGGER_OP_COUNT and self._mem_ops - self._arm_base >= self.crash_plan.op_count:
            self._fire_crash()
        end = addr + length
        if addr < 0 or end > self._frontier:
            raise OutOfArena(f"read [{addr}, {end}) outside mapped region")
        off = addr & self._offset_mask
        base = addr - off
        c = self.counters
        nsets = self._num_sets

        cache = self._sets[(base >> self._shift) % nsets] if nsets > 1 else self._set0
        entry = cache.get(base)
        if entry is None:
            entry = self._line_fill(cache, base)
        else:
            c.hits += 1
            cache.move_to_end(base)
            self._stamp += 1
            entry[2] = self._stamp
        tail = off + length
        if tail <= self._ls:
            out = bytes(entry[1][off:tail])
        else:
            last_base = base + self._ls
            if end - last_base > self._ls:
                raise ValueError("access spans more than two cache lines")
            head = bytes(entry[1][off:])
            cache2 = self._sets[(last_base >> self._shift) % nsets] if nsets > 1 else self._set0
            entry2 = cache2.get(last_base)
            if entry2 is None:
                entry2 = self._line_fill(cache2, last_base)
            else:
                c.hits += 1
                cache2.move_to_end(last_base)
                self._stamp += 1
                entry2[2] = self._stamp
            out = head + bytes(entry2[1][:end - last_base])
        c.loads += 1
        self._mem_ops += 1
        return out

    def write(self, addr, data):
        """Write-allocate store of `data` at addr (span <= 2 lines)."""
        if self.crashed:
            raise CrashedEngine("write after crash")
        if self._trigger == _TRIGGER_OP_COUNT and self._mem_ops - self._arm_base >= self.crash_plan.op_count:
            self._fire_crash()
        length = len(data)
        end = addr + length
        if addr < 0 or end > self._frontier:
            raise OutOfArena(f"write [{addr}, {end}) outside mapped region")
        off = addr & self._offset_mask
        base = addr - off
        c = self.counters
        nsets = self._num_sets

        cache = self._sets[(base >> self._shift) % nsets] if nsets > 1 else self._set0
        entry = cache.get(base)
        if entry is None:
            entry = self._line_fill(cache, base)
        else:
            c.hits += 1
            cache.move_to_end(base)
            self._stamp += 1
            entry[2] = self._stamp
        tail = off + length
        if tail <= self._ls:
            entry[0] = True
            entry[1][off:tail] = data
        else:
            last_base = base + self._ls
            if end - last_base > self._ls:
                raise ValueError("access spans more than two cache lines")
            split = self._ls - off
            entry[0] = True
            entry[1][off:] = data[:split]
            cache2 = self._sets[(last_base >> self._shift) % nsets] if nsets > 1 else self._set0
            entry2 = cache2.get(last_base)
            if entry2 is None:
                entry2 = self._line_fill(cache2, last_base)
            else:
                c.hits += 1
                cache2.move_to_end(last_base)
                self._stamp += 1
                entry2[2] = self._stamp
            entry2[0] = True
            entry2[1][:length - split] = data[split:]
        c.stores += 1
        self._mem_ops += 1

    def clflush(self, addr):
        """Write back (if dirty) and invalidate the line containing addr.

        Flushing a clean or absent line still costs one flush event.
        """
        if self.crashed:
            raise CrashedEngine("clflush after crash")
        shift = self._shift
        base = (addr >> shift) << shift
        nsets = self._num_sets
        cache = self._sets[(base >> shift) % nsets] if nsets > 1 else self._sets[0]
        entry = cache.pop(base, None)
        c = self.counters
        c.flush_ops += 1
        if entry is not None and entry[0]:
            self.nvm.write_line(base, entry[1])
            c.writebacks += 1
            c.flushed_dirty += 1
        else:
            c.flushed_clean_or_absent += 1

    def persist_init(self, addr, data):
        """Write directly into NVM, bypassing the cache and all counters.

        Models state that was initialized and flushed before the run.  Any
        cached copies of the touched lines are dropped so clean lines never
        disagree with NVM.
        """
        end = addr + len(data)
        if addr < 0 or end > self._frontier:
            raise OutOfArena(f"persist_init [{addr}, {end}) outside mapped region")
        self.nvm.write(addr, data)
        shift = self._shift
        base = (addr >> shift) << shift
        nsets = self._num_sets
        while base < end:
            cache = self._sets[(base >> shift) % nsets] if nsets > 1 else self._sets[0]
            cache.pop(base, None)
            base += self._ls

    def inspect_cache(self):
        """Resident lines as CacheLineEntry views, oldest stamp first."""
        out = []
        for cache in self._sets:
            for base, entry in cache.items():
                out.append(CacheLineEntry(base, entry[0], bytes(entry[1]), entry[2]))
        out.sort(key=lambda e: e.lru_stamp)
        return out
