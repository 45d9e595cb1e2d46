"""Tests for arena allocation, element access, and flush accounting."""

import json
import random

import pytest

from crashsim.arena import Arena
from crashsim.errors import DuplicateName, IndexOutOfRange
from crashsim.simcore import CacheConfig, SimEngine


def fresh(capacity=4096):
    eng = SimEngine(CacheConfig(capacity))
    return eng, Arena(eng)


class TestAlloc:
    def test_initial_values_visible_after_immediate_crash(self):
        eng, arena = fresh()
        b = arena.alloc_array("b", "f64", 4, initial=[1.0, 2.0, 3.0, 4.0])
        snap = eng.crash()
        assert [b.read_from_snapshot(snap, i) for i in range(4)] == [1.0, 2.0, 3.0, 4.0]

    def test_zero_length_is_valid(self):
        _, arena = fresh()
        h = arena.alloc_array("empty", "f64", 0)
        assert h.length == 0

    def test_two_allocs_disjoint_line_aligned(self):
        eng, arena = fresh()
        ls = eng.config.line_size
        a = arena.alloc_array("a", "f64", 3)
        b = arena.alloc_array("b", "i64", 5)
        assert a.base_address % ls == 0
        assert b.base_address % ls == 0
        assert a.base_address + 8 * a.length <= b.base_address

    def test_duplicate_name_rejected(self):
        _, arena = fresh()
        arena.alloc_array("x", "f64", 1)
        with pytest.raises(DuplicateName):
            arena.alloc_array("x", "f64", 1)

    def test_layout_json_round_trip(self):
        _, arena = fresh()
        arena.alloc_array("a", "f64", 3)
        arena.alloc_array("b", "i64", 2)
        layout = json.loads(arena.layout_json())
        assert [e["name"] for e in layout["allocations"]] == ["a", "b"]
        assert layout["allocations"][0]["element_kind"] == "f64"


class TestLoadStore:
    def test_store_then_load(self):
        _, arena = fresh()
        h = arena.alloc_array("v", "f64", 8)
        h.store(3, -2.5)
        assert h.load(3) == -2.5

    def test_persist_initialized_load_without_store(self):
        _, arena = fresh()
        h = arena.alloc_array("v", "i64", 3, initial=[7, -8, 9])
        assert [h.load(i) for i in range(3)] == [7, -8, 9]

    def test_store_without_flush_not_in_nvm(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 2, initial=[1.0, 1.0])
        h.store(0, 5.0)
        snap = eng.crash()
        assert h.read_from_snapshot(snap, 0) == 1.0

    def test_index_out_of_range(self):
        _, arena = fresh()
        h = arena.alloc_array("v", "f64", 2)
        with pytest.raises(IndexOutOfRange):
            h.load(2)
        with pytest.raises(IndexOutOfRange):
            h.store(-1, 0.0)

    def test_block_access(self):
        _, arena = fresh()
        h = arena.alloc_array("v", "f64", 16)
        h.store_block(4, (1.0, 2.0, 3.0, 4.0, 5.0))
        assert h.load_block(4, 5) == (1.0, 2.0, 3.0, 4.0, 5.0)
        assert h.load(6) == 3.0


class TestFlush:
    def test_flush_range_one_line(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 8)
        for i in range(8):
            h.store(i, float(i))
        h.flush_range(0, 8)
        assert eng.counters.flush_ops == 1

    def test_flush_element_twice_second_clean(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 8)
        h.store(0, 1.0)
        h.flush_element(0)
        h.flush_element(1)  # same line, now clean
        c = eng.counters
        assert c.flush_ops == 2
        assert c.flushed_dirty == 1
        assert c.flushed_clean_or_absent == 1

    def test_flush_range_sixteen_elements_two_lines(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 16)
        n = h.flush_range(0, 16)
        assert n == 2
        assert eng.counters.flush_ops == 2

    def test_flush_range_line_count_matches_span(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 64)
        rng = random.Random(3)
        for _ in range(50):
            lo = rng.randrange(0, 64)
            hi = rng.randrange(lo, 65)
            before = eng.counters.flush_ops
            issued = h.flush_range(lo, hi)
            assert eng.counters.flush_ops - before == issued
            if hi > lo:
                ls = eng.config.line_size
                first = (h.base_address + 8 * lo) // ls
                last = (h.base_address + 8 * hi - 1) // ls
                assert issued == last - first + 1
            else:
                assert issued == 0


class TestSnapshotReads:
    def test_store_flush_then_snapshot(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "f64", 3, initial=[1.0, 2.0, 3.0])
        h.store(1, 9.0)
        h.flush_element(1)
        snap = eng.crash()
        assert h.read_from_snapshot(snap, 1) == 9.0
        assert h.read_from_snapshot(snap, 0) == 1.0

    def test_snapshot_range_numpy(self):
        eng, arena = fresh()
        h = arena.alloc_array("v", "i64", 6, initial=[1, 2, 3, 4, 5, 6])
        snap = eng.crash()
        assert list(h.snapshot_range(snap, 2, 5)) == [3, 4, 5]


class TestAddressBijection:
    def test_slots_unique_and_round_trip(self):
        eng, arena = fresh()
        rng = random.Random(17)
        handles = []
        for k in range(12):
            handles.append(
                arena.alloc_array(f"arr{k}", rng.choice(("f64", "i64")), rng.randrange(0, 40))
            )
        seen = {}
        for h in handles:
            for i in range(h.length):
                addr = h.address_of(i)
                assert addr == h.base_address + 8 * i
                assert addr not in seen
                seen[addr] = (h.name, i)
        # round trip: store a distinct value per slot and read it back
        for h in handles:
            for i in range(h.length):
                if h.element_kind == "i64":
                    h.store(i, h.address_of(i))
        for h in handles:
            for i in range(h.length):
                if h.element_kind == "i64":
                    assert h.load(i) == h.address_of(i)
