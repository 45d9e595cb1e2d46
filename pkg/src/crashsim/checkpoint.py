"""Memory-based checkpoint baseline: copy, flush, then commit.

The comparator for the algorithm-directed schemes.  Protected element
ranges are copied through the cache into double-buffered shadow arrays,
every shadow line is flushed, and finally a sequence scalar is bumped
and flushed.  A crash between the copy and the commit leaves the
previous checkpoint intact, so restore always returns a value set that
was live at a single past commit.
"""

import numpy as np

from .errors import NoCommittedCheckpoint


class CheckpointRegion:
    """Double-buffered shadows plus a flushed commit sequence scalar."""

    def __init__(self, arena, protected, name="ckpt"):
        """protected: list of (handle, lo, hi) element ranges to shadow."""
        self.arena = arena
        self.engine = arena.engine
        self.protected = list(protected)
        self.shadows = []
        for idx, (handle, lo, hi) in enumerate(self.protected):
            size = hi - lo
            pair = (
                arena.alloc_array(f"{name}_a_{idx}", handle.element_kind, size),
                arena.alloc_array(f"{name}_b_{idx}", handle.element_kind, size),
            )
            self.shadows.append(pair)
        self.seq = arena.alloc_scalar(f"{name}_seq", "i64", initial=0)
        self._seq = 0

    def checkpoint(self, ranges=None):
        """Copy + flush the protected ranges, then commit.  Returns the id."""
        ranges = self.protected if ranges is None else ranges
        if len(ranges) != len(self.shadows):
            raise ValueError("range count does not match protected slots")
        new_seq = self._seq + 1
        buf = (new_seq - 1) % 2
        copied = 0
        for (handle, lo, hi), pair in zip(ranges, self.shadows):
            shadow = pair[buf]
            if hi - lo != shadow.length:
                raise ValueError("range size does not match shadow slot")
            for i in range(lo, hi):
                shadow.store(i - lo, handle.load(i))
            copied += 8 * (hi - lo)
            shadow.flush_range(0, shadow.length)
        self.engine.counters.memcpy_bytes += copied
        self.seq.store(0, new_seq)
        self.seq.flush_element(0)
        self._seq = new_seq
        return new_seq

    def restore(self, snapshot):
        """Values of the last committed checkpoint found in the snapshot."""
        seq = int(self.seq.read_from_snapshot(snapshot, 0))
        if seq == 0:
            raise NoCommittedCheckpoint("no checkpoint ever committed")
        buf = (seq - 1) % 2
        return seq, [pair[buf].snapshot_all(snapshot) for pair in self.shadows]
