"""Checkpoint baseline: cost accounting and crash atomicity."""

import numpy as np
import pytest

from crashsim.arena import Arena
from crashsim.checkpoint import CheckpointRegion
from crashsim.errors import NoCommittedCheckpoint
from crashsim.simcore import CacheConfig, CrashFired, CrashPlan, SimEngine


def setup(capacity=8192):
    eng = SimEngine(CacheConfig(capacity))
    return eng, Arena(eng)


class TestCost:
    def test_single_array_copy_and_flush_counts(self):
        eng, arena = setup()
        src = arena.alloc_array("data", "f64", 64, initial=np.arange(64.0))
        region = CheckpointRegion(arena, [(src, 0, 64)])
        f0 = eng.counters.flush_ops
        region.checkpoint()
        assert eng.counters.memcpy_bytes == 512
        # 8 shadow lines + 1 commit line
        assert eng.counters.flush_ops - f0 == 9

    def test_cost_dwarfs_single_line_flushing(self):
        # protecting three 256-element rows costs >= 3*256*8/64 flushes per
        # checkpoint versus one line for an algorithm-directed scheme
        eng, arena = setup(capacity=65536)
        n = 256
        handles = [arena.alloc_array(k, "f64", n, initial=np.zeros(n)) for k in "pqz"]
        region = CheckpointRegion(arena, [(h, 0, n) for h in handles])
        f0 = eng.counters.flush_ops
        region.checkpoint()
        per_checkpoint = eng.counters.flush_ops - f0
        assert per_checkpoint >= 3 * n * 8 // 64
        assert per_checkpoint + eng.counters.memcpy_bytes >= 100 * 1


class TestRestore:
    def test_restore_returns_committed_values(self):
        eng, arena = setup()
        src = arena.alloc_array("v", "f64", 8, initial=[1.0] * 8)
        region = CheckpointRegion(arena, [(src, 0, 8)])
        region.checkpoint()
        snap = eng.crash()
        seq, values = region.restore(snap)
        assert seq == 1
        np.testing.assert_array_equal(values[0], np.ones(8))

    def test_fresh_region_raises(self):
        eng, arena = setup()
        src = arena.alloc_array("v", "f64", 4, initial=[0.0] * 4)
        region = CheckpointRegion(arena, [(src, 0, 4)])
        snap = eng.crash()
        with pytest.raises(NoCommittedCheckpoint):
            region.restore(snap)

    def test_crash_mid_second_checkpoint_keeps_first(self):
        eng, arena = setup()
        src = arena.alloc_array("v", "f64", 8, initial=[1.0] * 8)
        region = CheckpointRegion(arena, [(src, 0, 8)])
        region.checkpoint()
        for i in range(8):
            src.store(i, 2.0)
        # crash after a few ops of the second checkpoint's copy loop
        eng.set_crash_plan(CrashPlan.after_op_count(5))
        with pytest.raises(CrashFired) as exc:
            region.checkpoint()
        seq, values = region.restore(exc.value.snapshot)
        assert seq == 1
        np.testing.assert_array_equal(values[0], np.ones(8))

    def test_alternating_buffers(self):
        eng, arena = setup()
        src = arena.alloc_array("v", "f64", 4, initial=[0.0] * 4)
        region = CheckpointRegion(arena, [(src, 0, 4)])
        for val in (1.0, 2.0, 3.0):
            for i in range(4):
                src.store(i, val)
            region.checkpoint()
        snap = eng.crash()
        seq, values = region.restore(snap)
        assert seq == 3
        np.testing.assert_array_equal(values[0], [3.0] * 4)


class TestAtomicity:
    def test_exhaustive_crash_sweep(self):
        # at any crash point, restore yields exactly the values of one commit
        def drive(plan):
            eng, arena = setup()
            src = arena.alloc_array("v", "f64", 6, initial=[0.0] * 6)
            aux = arena.alloc_array("w", "i64", 3, initial=[0] * 3)
            region = CheckpointRegion(arena, [(src, 0, 6), (aux, 0, 3)])
            eng.set_crash_plan(plan)
            states = {}
            try:
                for commit in (1, 2, 3):
                    for i in range(6):
                        src.store(i, float(commit * 10 + i))
                    for i in range(3):
                        aux.store(i, commit * 100 + i)
                    region.checkpoint()
                    states[commit] = (
                        [float(commit * 10 + i) for i in range(6)],
                        [commit * 100 + i for i in range(3)],
                    )
            except CrashFired as cf:
                return region, cf.snapshot, states
            return region, eng.crash(), states

        # run once to learn the total op count, then sweep every crash point
        region, snap, _ = drive(CrashPlan.never())
        total_ops = region.engine.counters.loads + region.engine.counters.stores
        for cut in range(0, total_ops + 1, 1):
            region, snap, states = drive(CrashPlan.after_op_count(cut))
            try:
                seq, values = region.restore(snap)
            except NoCommittedCheckpoint:
                continue
            expected = states[seq]
            np.testing.assert_array_equal(values[0], expected[0])
            np.testing.assert_array_equal(values[1], expected[1])
