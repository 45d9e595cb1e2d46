"""Typed persistent arrays mapped onto the simulated address space.

Every workload value lives in an arena array of 8-byte little-endian
elements (f64 or i64).  Loads and stores go through the engine's cache;
persist-initialized values are written straight into NVM to model data
that was flushed before the run started.  Each allocation begins on a
fresh cache line so distinct objects never share a line.
"""

import json
import struct

import numpy as np

from .errors import AddressSpaceExhausted, DuplicateName, IndexOutOfRange

_F64 = struct.Struct("<d")
_I64 = struct.Struct("<q")

_BLOCK_STRUCTS = {}


def _block_struct(kind, count):
    key = (kind, count)
    s = _BLOCK_STRUCTS.get(key)
    if s is None:
        s = struct.Struct(f"<{count}{'d' if kind == 'f64' else 'q'}")
        _BLOCK_STRUCTS[key] = s
    return s

# simulated address space ceiling; generous for desk-scale workloads
_ADDRESS_SPACE_LIMIT = 1 << 40


class ArrayHandle:
    """A named array of 8-byte elements at a fixed arena address range."""

    __slots__ = ("name", "element_kind", "length", "base_address", "_engine", "_pack")

    def __init__(self, name, element_kind, length, base_address, engine):
        self.name = name
        self.element_kind = element_kind
        self.length = length
        self.base_address = base_address
        self._engine = engine
        self._pack = _F64 if element_kind == "f64" else _I64

    def address_of(self, i):
        if i < 0 or i >= self.length:
            raise IndexOutOfRange(f"{self.name}[{i}] with length {self.length}")
        return self.base_address + 8 * i

    def load(self, i):
        return self._pack.unpack(self._engine.read(self.address_of(i), 8))[0]

    def store(self, i, value):
        self._engine.write(self.address_of(i), self._pack.pack(value))

    def load_block(self, i, count):
        """Read `count` consecutive elements in one engine transaction.

        The span must fit within two cache lines; callers use this for
        small contiguous records (interpolation points, the 5-wide
        cross-section vector), not whole vectors.
        """
        if count < 1 or i < 0 or i + count > self.length:
            raise IndexOutOfRange(f"{self.name}[{i}:{i + count}]")
        raw = self._engine.read(self.base_address + 8 * i, 8 * count)
        return _block_struct(self.element_kind, count).unpack(raw)

    def store_block(self, i, values):
        count = len(values)
        if count < 1 or i < 0 or i + count > self.length:
            raise IndexOutOfRange(f"{self.name}[{i}:{i + count}]")
        raw = _block_struct(self.element_kind, count).pack(*values)
        self._engine.write(self.base_address + 8 * i, raw)

    def flush_element(self, i):
        self._engine.clflush(self.address_of(i))

    def flush_range(self, lo, hi):
        """clflush each distinct line covering elements [lo, hi)."""
        if lo < 0 or hi > self.length or lo > hi:
            raise IndexOutOfRange(f"{self.name}[{lo}:{hi}]")
        if lo == hi:
            return 0
        ls = self._engine.config.line_size
        first = (self.base_address + 8 * lo) // ls
        last = (self.base_address + 8 * hi - 1) // ls
        for line in range(first, last + 1):
            self._engine.clflush(line * ls)
        return last - first + 1

    def persist_init(self, values, offset=0):
        """Write values straight into NVM starting at element `offset`."""
        n = len(values)
        if n == 0:
            return
        if offset < 0 or offset + n > self.length:
            raise IndexOutOfRange(f"{self.name}[{offset}:{offset + n}]")
        arr = np.asarray(values, dtype=np.float64 if self.element_kind == "f64" else np.int64)
        self._engine.persist_init(self.base_address + 8 * offset, arr.tobytes())

    def read_from_snapshot(self, snapshot, i):
        """Decode element i from a crash snapshot."""
        if i < 0 or i >= self.length:
            raise IndexOutOfRange(f"{self.name}[{i}]")
        return self._pack.unpack(snapshot.read(self.base_address + 8 * i, 8))[0]

    def snapshot_range(self, snapshot, lo, hi):
        """Decode elements [lo, hi) from a snapshot as a numpy array."""
        if lo < 0 or hi > self.length or lo > hi:
            raise IndexOutOfRange(f"{self.name}[{lo}:{hi}]")
        raw = snapshot.read(self.base_address + 8 * lo, 8 * (hi - lo))
        dtype = np.float64 if self.element_kind == "f64" else np.int64
        return np.frombuffer(raw, dtype=dtype).copy()

    def snapshot_all(self, snapshot):
        return self.snapshot_range(snapshot, 0, self.length)


class Arena:
    """Append-only allocator of named arrays over one engine."""

    def __init__(self, engine):
        self.engine = engine
        self.allocations = []
        self._by_name = {}
        self._next_free = 0

    def alloc_array(self, name, kind, length, initial=None):
        if name in self._by_name:
            raise DuplicateName(name)
        if kind not in ("f64", "i64"):
            raise ValueError(f"unknown element kind {kind!r}")
        if length < 0:
            raise ValueError("length must be >= 0")
        ls = self.engine.config.line_size
        base = self._next_free
        nbytes = 8 * length
        end = base + nbytes
        if end > _ADDRESS_SPACE_LIMIT:
            raise AddressSpaceExhausted(f"allocating {name}")
        # next allocation starts on a fresh line
        self._next_free = ((end + ls - 1) // ls) * ls
        self.engine.map_frontier(self._next_free if length else base)
        handle = ArrayHandle(name, kind, length, base, self.engine)
        self.allocations.append(handle)
        self._by_name[name] = handle
        if initial is not None:
            if len(initial) != length:
                raise ValueError("initial values length mismatch")
            handle.persist_init(initial)
        return handle

    def alloc_scalar(self, name, kind, initial=None):
        init = None if initial is None else [initial]
        return self.alloc_array(name, kind, 1, initial=init)

    def __getitem__(self, name):
        return self._by_name[name]

    def layout_dict(self):
        return {
            "line_size": self.engine.config.line_size,
            "allocations": [
                {
                    "name": h.name,
                    "element_kind": h.element_kind,
                    "length": h.length,
                    "base_address": h.base_address,
                }
                for h in self.allocations
            ],
        }

    def layout_json(self):
        return json.dumps(self.layout_dict(), sort_keys=True, indent=2)
