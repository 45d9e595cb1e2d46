"""Batch experiment runner over the three workloads and three modes.

Each run builds a fresh engine, executes the workload under its crash
plan, performs the mode's recovery if the crash fired, and validates the
final result against an oracle computed outside the engine (plain numpy
for the solvers, exact count conservation for the Monte Carlo kernel).
Reports are plain dicts with a stable key order and no timestamps, so a
repeated spec serializes byte-identically.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import abft as abft_mod
from . import cg as cg_mod
from . import mc as mc_mod
from .arena import Arena
from .checkpoint import CheckpointRegion
from .errors import NoCommittedCheckpoint
from .simcore import CacheConfig, CrashFired, CrashPlan, SimEngine

WORKLOADS = ("cg", "abft", "mc")
MODES = ("native", "checkpoint", "algorithm")

_DEFAULT_PARAMS = {
    "cg": {"n": 256, "max_iters": 15, "tol": 1e-8},
    "abft": {"n": 20, "k": 7, "tol": 1e-8},
    "mc": {
        "n_lookups": 20000,
        "n_nuclides": 8,
        "gridpoints_per_nuclide": 64,
        "n_materials": 12,
        "max_nuclides_per_material": 3,
        "flush_period": 0,
    },
}


@dataclass
class ExperimentSpec:
    """Everything that determines one run; two equal specs give equal reports."""

    workload: str
    mode: str
    cache_bytes: int = 16384
    line_size: int = 64
    associativity: int = 0
    crash_label: str = ""
    crash_occurrence: int = 1
    crash_op_count: int = -1
    seed: int = 1
    repetitions: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.workload not in WORKLOADS:
            raise ValueError(f"unknown workload {self.workload!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        merged = dict(_DEFAULT_PARAMS[self.workload])
        merged.update(self.params)
        self.params = merged

    def cache_config(self):
        return CacheConfig(self.cache_bytes, self.line_size, self.associativity)

    def crash_plan(self):
        if self.crash_op_count >= 0:
            return CrashPlan.after_op_count(self.crash_op_count)
        if self.crash_label:
            return CrashPlan.at_label(self.crash_label, self.crash_occurrence)
        return CrashPlan.never()

    def to_dict(self):
        return {
            "workload": self.workload,
            "mode": self.mode,
            "cache_bytes": self.cache_bytes,
            "line_size": self.line_size,
            "associativity": self.associativity,
            "crash_label": self.crash_label,
            "crash_occurrence": self.crash_occurrence,
            "crash_op_count": self.crash_op_count,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "params": dict(sorted(self.params.items())),
        }

    @staticmethod
    def from_dict(data):
        data = dict(data)
        params = data.pop("params", {})
        return ExperimentSpec(params=params, **data)


def _base_report(spec):
    return {
        "spec": spec.to_dict(),
        "crashed": False,
        "result_valid": False,
        "iterations_lost": None,
        "detection_probes": None,
        "recovery": None,
        "max_counter_deviation": None,
        "counters": None,
        "nvm_digest": None,
    }


# -- CG -----------------------------------------------------------------------


def _run_cg(spec, report):
    params = spec.params
    n = params["n"]
    max_iters = params["max_iters"]
    tol = params["tol"]
    problem = cg_mod.generate_problem(n, spec.seed)
    engine = SimEngine(spec.cache_config())
    plan = spec.crash_plan()

    if spec.mode == "algorithm":
        res = cg_mod.cg_run(problem, max_iters, engine, plan)
        if res.completed:
            solution = res.solution
            report["iterations_lost"] = 0
        else:
            report["crashed"] = True
            detect = cg_mod.detect_restart(res.snapshot, res.arena, tol)
            resumed = cg_mod.resume(
                res.snapshot, res.arena, detect.restart_iteration,
                SimEngine(spec.cache_config()), tol,
            )
            solution = resumed.solution
            report["iterations_lost"] = detect.iterations_lost
            report["detection_probes"] = detect.probes

    elif spec.mode == "checkpoint":
        engine, solution, lost = _run_cg_checkpoint(spec, problem, engine, plan)
        report["crashed"] = lost is not None
        report["iterations_lost"] = lost or 0

    else:  # native: on crash, rerun from scratch
        res = cg_mod.cg_run(problem, max_iters, engine, plan)
        if res.completed:
            solution = res.solution
            report["iterations_lost"] = 0
        else:
            report["crashed"] = True
            crash_iter = int(res.arena.iter_counter.read_from_snapshot(res.snapshot, 0))
            report["iterations_lost"] = crash_iter
            rerun = cg_mod.cg_run(problem, max_iters, SimEngine(spec.cache_config()))
            solution = rerun.solution

    oracle, _ = cg_mod.reference_cg(problem, max_iters)
    denom = float(np.linalg.norm(oracle)) + 1e-30
    report["result_valid"] = bool(np.linalg.norm(solution - oracle) <= 1e-8 * denom)
    return engine


def _run_cg_checkpoint(spec, problem, engine, plan):
    """Original CG with a per-iteration checkpoint of p, q, z and commit id."""
    params = spec.params
    n = params["n"]
    max_iters = params["max_iters"]
    ca = cg_mod.CgArena.build(engine, problem, max_iters)
    region = CheckpointRegion(
        ca.arena, [(ca.p, 0, n), (ca.q, 0, n), (ca.z, 0, n)], name="cg_ckpt"
    )

    def checkpoint_rows(t):
        region.checkpoint(
            [(ca.p, t * n, (t + 1) * n), (ca.q, t * n, (t + 1) * n),
             (ca.z, t * n, (t + 1) * n)]
        )

    res = cg_mod.cg_run(problem, max_iters, engine, plan,
                        on_iteration=checkpoint_rows, arena=ca)
    if res.completed:
        return engine, res.solution, None

    # restore the last committed iteration and rebuild the residual from it
    snapshot = res.snapshot
    try:
        seq, (p_row, _q_row, z_row) = region.restore(snapshot)
    except NoCommittedCheckpoint:
        seq, p_row, z_row = 0, None, None
    fresh = SimEngine(spec.cache_config())
    ca2 = cg_mod.CgArena.build(fresh, problem, max_iters)
    if seq > 0:
        r_row = problem.b - problem.matvec(z_row)
        ca2.p.persist_init(p_row, offset=seq * n)
        ca2.z.persist_init(z_row, offset=seq * n)
        ca2.r.persist_init(r_row, offset=seq * n)
        rho = cg_mod._seq_dot(r_row, r_row)
    else:
        r0 = problem.b - problem.matvec(problem.x0)
        rho = cg_mod._seq_dot(r0, r0)
    last, _ = cg_mod._cg_loop(ca2, rho, start_iter=seq + 1)
    solution = np.array([ca2.z.load(last * n + i) for i in range(n)])
    crash_iter = int(ca.iter_counter.read_from_snapshot(snapshot, 0))
    return fresh, solution, crash_iter - seq


# -- ABFT ---------------------------------------------------------------------


def _abft_inputs(spec):
    n = spec.params["n"]
    rng = np.random.default_rng(spec.seed)
    a = rng.uniform(-1.0, 1.0, (n, n))
    b = rng.uniform(-1.0, 1.0, (n, n))
    return a, b


def _run_abft(spec, report):
    params = spec.params
    cfg = abft_mod.AbftConfig(params["n"], params["k"], params["tol"])
    a, b = _abft_inputs(spec)
    engine = SimEngine(spec.cache_config())
    plan = spec.crash_plan()

    if spec.mode == "algorithm":
        res = abft_mod.abft_mm_run(a, b, cfg, engine, plan)
        if res.completed:
            c_full = res.c_full
        else:
            report["crashed"] = True
            recovery_plan = abft_mod.recover(res.snapshot, res.arena, cfg)
            c_full, _ = abft_mod.complete_recovery(
                res.snapshot, cfg, SimEngine(spec.cache_config()),
                plan=recovery_plan, source_arena=res.arena,
            )
            report["recovery"] = recovery_plan.summary()
    elif spec.mode == "checkpoint":
        engine, c_full, redone = _run_abft_checkpoint(spec, a, b, cfg, engine, plan)
        report["crashed"] = redone is not None
        if redone is not None:
            report["recovery"] = {"recomputed_submults": redone}
    else:  # native in-place multiply; crash means rerun everything
        c_full, crashed = _run_abft_native(spec, a, b, cfg, engine, plan)
        report["crashed"] = crashed
        if crashed:
            report["recovery"] = {"recomputed_submults": cfg.num_submults}

    expected = abft_mod.direct_product_checked(a, b)
    denom = float(np.abs(expected).max()) + 1e-30
    report["result_valid"] = bool(np.abs(c_full - expected).max() <= 1e-9 * denom)
    return engine


class _InPlaceAbft:
    """Original single-loop rank-k multiply, accumulating straight into C."""

    def __init__(self, engine, cfg, a, b):
        self.engine = engine
        self.cfg = cfg
        self.m = cfg.n + 1
        arena = Arena(engine)
        self.arena = arena
        m = self.m
        a_c = np.zeros((m, m))
        a_c[:, : cfg.n] = abft_mod.encode_column_checksum(a).values
        b_r = np.zeros((m, m))
        b_r[: cfg.n, :] = abft_mod.encode_row_checksum(b).values
        self.a_c = arena.alloc_array("A_c", "f64", m * m, initial=a_c.ravel())
        self.b_r = arena.alloc_array("B_r", "f64", m * m, initial=b_r.ravel())
        self.c_f = arena.alloc_array("C_final", "f64", m * m, initial=np.zeros(m * m))

    def run_submult(self, s):
        eng = self.engine
        m = self.m
        k = self.cfg.k
        lo = (s - 1) * k
        a_h, b_h, c_h = self.a_c, self.b_r, self.c_f
        for i in range(m):
            a_row = a_h.load_block(i * m + lo, k)
            for j in range(m):
                acc = c_h.load(i * m + j)
                for t in range(k):
                    acc += a_row[t] * b_h.load((lo + t) * m + j)
                c_h.store(i * m + j, acc)

    def result(self):
        m = self.m
        return np.array([self.c_f.load(i) for i in range(m * m)]).reshape(m, m)


def _run_abft_native(spec, a, b, cfg, engine, plan):
    runner = _InPlaceAbft(engine, cfg, a, b)
    engine.set_crash_plan(plan)
    try:
        for s in range(1, cfg.num_submults + 1):
            runner.run_submult(s)
            engine.maybe_fire_crash(abft_mod.SUBMULT_LABEL)
        return runner.result(), False
    except CrashFired:
        fresh = SimEngine(spec.cache_config())
        rerun = _InPlaceAbft(fresh, cfg, a, b)
        for s in range(1, cfg.num_submults + 1):
            rerun.run_submult(s)
        return rerun.result(), True


def _run_abft_checkpoint(spec, a, b, cfg, engine, plan):
    """In-place multiply checkpointing C after every submatrix product."""
    runner = _InPlaceAbft(engine, cfg, a, b)
    m = runner.m
    region = CheckpointRegion(runner.arena, [(runner.c_f, 0, m * m)], name="abft_ckpt")
    engine.set_crash_plan(plan)
    try:
        for s in range(1, cfg.num_submults + 1):
            runner.run_submult(s)
            region.checkpoint()
            engine.maybe_fire_crash(abft_mod.SUBMULT_LABEL)
        return engine, runner.result(), None
    except CrashFired as cf:
        fresh = SimEngine(spec.cache_config())
        rerun = _InPlaceAbft(fresh, cfg, a, b)
        try:
            seq, (c_vals,) = region.restore(cf.snapshot)
        except NoCommittedCheckpoint:
            seq, c_vals = 0, None
        if seq > 0:
            rerun.c_f.persist_init(c_vals)
        for s in range(seq + 1, cfg.num_submults + 1):
            rerun.run_submult(s)
        return fresh, rerun.result(), cfg.num_submults - seq


# -- MC -----------------------------------------------------------------------


def _mc_config(spec):
    p = spec.params
    return mc_mod.McConfig(
        n_lookups=p["n_lookups"],
        n_nuclides=p["n_nuclides"],
        gridpoints_per_nuclide=p["gridpoints_per_nuclide"],
        n_materials=p["n_materials"],
        max_nuclides_per_material=p["max_nuclides_per_material"],
        flush_period=p["flush_period"],
        seed=spec.seed,
    )


def _run_mc(spec, report):
    cfg = _mc_config(spec)
    engine = SimEngine(spec.cache_config())
    inst = mc_mod.build_instance(cfg, engine)
    plan = spec.crash_plan()

    if spec.mode == "checkpoint":
        counters, crashed, engine = _run_mc_checkpoint(spec, cfg, inst, engine, plan)
    else:
        flushing = spec.mode == "algorithm"
        res = mc_mod.mc_run(inst, plan, flushing=flushing)
        crashed = not res.completed
        if crashed:
            restarted = mc_mod.mc_restart(
                res.snapshot, cfg, SimEngine(spec.cache_config()), flushing=flushing
            )
            counters = restarted.counters
        else:
            counters = res.counters

    report["crashed"] = crashed
    report["max_counter_deviation"] = mc_mod.max_pairwise_deviation(counters, cfg.n_lookups)
    report["recovery"] = {"counters": counters}
    # count conservation is the validity oracle: every lookup counted once
    report["result_valid"] = sum(counters) == cfg.n_lookups
    return engine


def _mc_checkpoint_region(inst):
    protected = [(inst.macro_xs, 0, 5)]
    protected += [(h, 0, 1) for h in inst.counters]
    protected += [(inst.lookup_index, 0, 1)]
    return CheckpointRegion(inst.arena, protected, name="mc_ckpt")


def _run_mc_checkpoint(spec, cfg, inst, engine, plan):
    region = _mc_checkpoint_region(inst)

    def on_period(next_i):
        inst.lookup_index.store(0, next_i)
        region.checkpoint()

    res = mc_mod.mc_run(inst, plan, flushing=False, on_period=on_period)
    if res.completed:
        return res.counters, False, engine

    fresh = SimEngine(spec.cache_config())
    inst2 = mc_mod.build_instance(cfg, fresh)
    region2 = _mc_checkpoint_region(inst2)
    try:
        _seq, values = region.restore(res.snapshot)
        inst2.macro_xs.persist_init(values[0])
        for h, v in zip(inst2.counters, values[1:6]):
            h.persist_init(v)
        inst2.lookup_index.persist_init(values[6])
    except NoCommittedCheckpoint:
        pass  # nothing committed: restart from scratch

    def on_period2(next_i):
        inst2.lookup_index.store(0, next_i)
        region2.checkpoint()

    res2 = mc_mod.mc_run(inst2, None, flushing=False, on_period=on_period2)
    return res2.counters, True, fresh


# -- entry points ---------------------------------------------------------------


def run(spec):
    """Execute one experiment spec and return its report dict."""
    reports = []
    for _ in range(max(1, spec.repetitions)):
        report = _base_report(spec)
        runner = {"cg": _run_cg, "abft": _run_abft, "mc": _run_mc}[spec.workload]
        engine = runner(spec, report)
        report["counters"] = engine.counters.to_dict()
        report["nvm_digest"] = engine.nvm.digest()
        reports.append(report)
    first = report_json(reports[0])
    for other in reports[1:]:
        if report_json(other) != first:
            raise AssertionError("nondeterministic report across repetitions")
    return reports[0]


def report_json(report):
    return json.dumps(report, sort_keys=True, indent=2)


_SWEEP_AXES = ("cache_bytes", "problem_size", "crash_point")

_SIZE_KEY = {"cg": "n", "abft": "n", "mc": "n_lookups"}


def sweep(spec, axis, values):
    """One run per axis value, in order; returns the list of reports."""
    if axis not in _SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    reports = []
    for v in values:
        d = spec.to_dict()
        d.pop("params")
        params = dict(spec.params)
        if axis == "cache_bytes":
            d["cache_bytes"] = int(v)
        elif axis == "problem_size":
            params[_SIZE_KEY[spec.workload]] = int(v)
        else:
            d["crash_occurrence"] = int(v)
        sub = ExperimentSpec(params=params, **d)
        report = run(sub)
        report["axis"] = axis
        report["axis_value"] = int(v)
        reports.append(report)
    return reports


_CSV_FIELDS = [
    "axis", "axis_value", "workload", "mode", "cache_bytes", "seed",
    "crash_label", "crash_occurrence", "crashed", "result_valid",
    "iterations_lost", "detection_probes", "max_counter_deviation",
    "loads", "stores", "hits", "misses", "evictions", "writebacks",
    "flush_ops", "flushed_dirty", "flushed_clean_or_absent", "memcpy_bytes",
    "nvm_digest",
]


def sweep_csv(reports):
    """Render sweep reports as a deterministic CSV table."""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        row = {
            "axis": rep.get("axis", ""),
            "axis_value": rep.get("axis_value", ""),
            "workload": rep["spec"]["workload"],
            "mode": rep["spec"]["mode"],
            "cache_bytes": rep["spec"]["cache_bytes"],
            "seed": rep["spec"]["seed"],
            "crash_label": rep["spec"]["crash_label"],
            "crash_occurrence": rep["spec"]["crash_occurrence"],
            "crashed": rep["crashed"],
            "result_valid": rep["result_valid"],
            "iterations_lost": rep["iterations_lost"],
            "detection_probes": rep["detection_probes"],
            "max_counter_deviation": rep["max_counter_deviation"],
            "nvm_digest": rep["nvm_digest"],
        }
        row.update({k: rep["counters"][k] for k in (
            "loads", "stores", "hits", "misses", "evictions", "writebacks",
            "flush_ops", "flushed_dirty", "flushed_clean_or_absent", "memcpy_bytes",
        )})
        writer.writerow(row)
    return out.getvalue()
