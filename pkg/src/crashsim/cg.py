"""Conjugate gradient with per-iteration history and restart-point detection.

The solver keeps one history row per iteration for the direction, matrix
product, residual, and solution vectors.  Row t holds the values produced
by iteration t; row 0 is the persist-initialized starting state.  The only
explicit flush is the line holding the iteration counter, once per
iteration.  After a crash, recovery scans the persisted history backwards
for the newest row that still satisfies the two run invariants

    direction/product orthogonality:  p[j] . q[j] == 0
    residual identity:                r[j] == b - A z[j]

and resumes the loop from the iteration after it.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .arena import Arena
from .errors import InconsistentRestartState, NonPositiveCurvature
from .simcore import CrashFired, CrashPlan

_F64 = struct.Struct("<d")
_I64 = struct.Struct("<q")
_EPS = 1e-30

ITER_LABEL = "iter_end"


@dataclass(frozen=True)
class CgProblem:
    """CSR symmetric positive definite system A x = b with start x0."""

    offs: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    b: np.ndarray
    x0: np.ndarray

    @property
    def n(self):
        return len(self.b)

    @property
    def nnz(self):
        return len(self.vals)

    def dense(self):
        a = np.zeros((self.n, self.n))
        for i in range(self.n):
            for k in range(self.offs[i], self.offs[i + 1]):
                a[i, self.cols[k]] = self.vals[k]
        return a

    def matvec(self, x):
        prod = self.vals * x[self.cols]
        out = np.add.reduceat(prod, self.offs[:-1])
        out[self.offs[:-1] == self.offs[1:]] = 0.0
        return out


def check_symmetry(problem, rtol=1e-12):
    a = problem.dense()
    scale = np.abs(a).max() or 1.0
    return np.abs(a - a.T).max() <= rtol * scale


def generate_problem(n, seed, x0=None):
    """Seeded tridiagonal SPD system.

    Diagonal 2 + U(0, 0.1), off-diagonals -1: weakly diagonally dominant,
    positive definite, with condition growing ~n^2 so a 15-iteration run
    never reaches machine convergence at the sizes used here.
    """
    rng = np.random.default_rng(seed)
    diag = 2.0 + 0.1 * rng.random(n)
    offs = [0]
    cols = []
    vals = []
    for i in range(n):
        if i > 0:
            cols.append(i - 1)
            vals.append(-1.0)
        cols.append(i)
        vals.append(diag[i])
        if i < n - 1:
            cols.append(i + 1)
            vals.append(-1.0)
        offs.append(len(cols))
    b = rng.uniform(-1.0, 1.0, n)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    return CgProblem(
        np.asarray(offs, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=float),
        b,
        x,
    )


def problem_from_dense(a, b, x0=None):
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    offs = [0]
    cols = []
    vals = []
    for i in range(n):
        for j in range(n):
            if a[i, j] != 0.0:
                cols.append(j)
                vals.append(a[i, j])
        offs.append(len(cols))
    return CgProblem(
        np.asarray(offs, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=float),
        np.asarray(b, dtype=float),
        np.zeros(n) if x0 is None else np.asarray(x0, dtype=float),
    )


def load_matrix_market(path, b=None, seed=0):
    """Load a coordinate Matrix Market file as a CG problem."""
    from scipy.io import mmread

    a = mmread(path).tocsr()
    n = a.shape[0]
    if b is None:
        b = np.random.default_rng(seed).uniform(-1.0, 1.0, n)
    problem = CgProblem(
        a.indptr.astype(np.int64),
        a.indices.astype(np.int64),
        a.data.astype(float),
        np.asarray(b, dtype=float),
        np.zeros(n),
    )
    if not check_symmetry(problem):
        raise ValueError("matrix is not symmetric")
    return problem


def _seq_dot(xs, ys):
    """Strictly sequential dot product; resume must reproduce run arithmetic."""
    acc = 0.0
    for x, y in zip(xs, ys):
        acc += x * y
    return acc


class CgArena:
    """All persistent state of one CG run mapped into an engine's arena."""

    def __init__(self, engine, n, nnz, max_iters):
        self.engine = engine
        self.n = n
        self.nnz = nnz
        self.max_iters = max_iters
        rows = max_iters + 2
        arena = Arena(engine)
        self.arena = arena
        self.offs = arena.alloc_array("A_offs", "i64", n + 1)
        self.cols = arena.alloc_array("A_cols", "i64", nnz)
        self.vals = arena.alloc_array("A_vals", "f64", nnz)
        self.b = arena.alloc_array("b", "f64", n)
        self.x0 = arena.alloc_array("x0", "f64", n)
        self.iter_counter = arena.alloc_scalar("iter_counter", "i64")
        self.p = arena.alloc_array("p_hist", "f64", rows * n)
        self.q = arena.alloc_array("q_hist", "f64", rows * n)
        self.r = arena.alloc_array("r_hist", "f64", rows * n)
        self.z = arena.alloc_array("z_hist", "f64", rows * n)

    @staticmethod
    def build(engine, problem, max_iters):
        ca = CgArena(engine, problem.n, problem.nnz, max_iters)
        ca.persist_problem(problem)
        return ca

    def persist_problem(self, problem):
        """Persist-initialize inputs and the iteration-0 history row."""
        self.offs.persist_init(problem.offs)
        self.cols.persist_init(problem.cols)
        self.vals.persist_init(problem.vals)
        self.b.persist_init(problem.b)
        self.x0.persist_init(problem.x0)
        self.iter_counter.persist_init([0])
        r0 = problem.b - problem.matvec(problem.x0)
        self.p.persist_init(r0, offset=0)
        self.r.persist_init(r0, offset=0)
        self.z.persist_init(problem.x0, offset=0)
        # q row 0 stays zero

    def row_from_snapshot(self, handle, snapshot, t):
        return handle.snapshot_range(snapshot, t * self.n, (t + 1) * self.n)

    def problem_from_snapshot(self, snapshot):
        return CgProblem(
            self.offs.snapshot_all(snapshot),
            self.cols.snapshot_all(snapshot),
            self.vals.snapshot_all(snapshot),
            self.b.snapshot_all(snapshot),
            self.x0.snapshot_all(snapshot),
        )

    def read_row_live(self, handle, t):
        """Read one history row through the cache (freshest values)."""
        n = self.n
        return np.array([handle.load(t * n + i) for i in range(n)])


@dataclass
class CgRunResult:
    completed: bool
    solution: np.ndarray | None
    iterations_run: int
    arena: CgArena
    snapshot: object = None
    flush_ops_in_loop: int = 0


def _cg_loop(ca, rho, start_iter, on_iteration=None):
    """Run iterations start_iter..max_iters; returns (last_iter, rho).

    on_iteration(t), when given, runs after iteration t's updates and
    before the crash label (the checkpoint-baseline hook).
    """
    eng = ca.engine
    read = eng.read
    write = eng.write
    unp = _F64.unpack
    pck = _F64.pack
    n = ca.n
    offs_b = ca.offs.base_address
    cols_b = ca.cols.base_address
    vals_b = ca.vals.base_address
    pb = ca.p.base_address
    qb = ca.q.base_address
    rb = ca.r.base_address
    zb = ca.z.base_address
    iq = _I64.unpack
    last_done = start_iter - 1

    for t in range(start_iter, ca.max_iters + 1):
        if rho == 0.0:
            break  # exactly converged; remaining iterations are no-ops
        ca.iter_counter.store(0, t)
        ca.iter_counter.flush_element(0)
        prev = 8 * (t - 1) * n
        cur = 8 * t * n

        # q[t] = A p[t-1]
        off_hi = iq(read(offs_b, 8))[0]
        for i in range(n):
            off_lo = off_hi
            off_hi = iq(read(offs_b + 8 * i + 8, 8))[0]
            acc = 0.0
            for k in range(off_lo, off_hi):
                col = iq(read(cols_b + 8 * k, 8))[0]
                acc += unp(read(vals_b + 8 * k, 8))[0] * unp(read(pb + prev + 8 * col, 8))[0]
            write(qb + cur + 8 * i, pck(acc))

        pq = 0.0
        for i in range(n):
            pq += unp(read(pb + prev + 8 * i, 8))[0] * unp(read(qb + cur + 8 * i, 8))[0]
        if pq <= 0.0:
            raise NonPositiveCurvature(f"p'Aq = {pq} at iteration {t}")
        alpha = rho / pq

        for i in range(n):
            zv = unp(read(zb + prev + 8 * i, 8))[0] + alpha * unp(read(pb + prev + 8 * i, 8))[0]
            write(zb + cur + 8 * i, pck(zv))

        rho0 = rho
        rho = 0.0
        for i in range(n):
            rv = unp(read(rb + prev + 8 * i, 8))[0] - alpha * unp(read(qb + cur + 8 * i, 8))[0]
            write(rb + cur + 8 * i, pck(rv))
            rho += rv * rv

        beta = rho / rho0
        for i in range(n):
            pv = unp(read(rb + cur + 8 * i, 8))[0] + beta * unp(read(pb + prev + 8 * i, 8))[0]
            write(pb + cur + 8 * i, pck(pv))

        last_done = t
        if on_iteration is not None:
            on_iteration(t)
        eng.maybe_fire_crash(ITER_LABEL)
    return last_done, rho


def cg_run(problem, max_iters, engine, crash_plan=None, on_iteration=None, arena=None):
    """Execute the full CG run on `engine`, honoring the crash plan.

    Returns the completed solution or the crash snapshot.  The only flush
    issued by the loop itself is the iteration-counter line, once per
    iteration.
    """
    ca = arena or CgArena.build(engine, problem, max_iters)
    engine.set_crash_plan(crash_plan or CrashPlan.never())
    r0 = problem.b - problem.matvec(problem.x0)
    rho = _seq_dot(r0, r0)
    flush_before = engine.counters.flush_ops
    try:
        last, _ = _cg_loop(ca, rho, start_iter=1, on_iteration=on_iteration)
    except CrashFired as cf:
        return CgRunResult(
            completed=False,
            solution=None,
            iterations_run=0,
            arena=ca,
            snapshot=cf.snapshot,
            flush_ops_in_loop=engine.counters.flush_ops - flush_before,
        )
    flush_in_loop = engine.counters.flush_ops - flush_before
    n = problem.n
    sol = np.array([ca.z.load(last * n + i) for i in range(n)])
    return CgRunResult(
        completed=True,
        solution=sol,
        iterations_run=last,
        arena=ca,
        flush_ops_in_loop=flush_in_loop,
    )


@dataclass
class ConsistencyCheck:
    iteration: int
    consistent: bool
    orth_residual: float
    eq_residual: float


@dataclass
class RestartReport:
    crash_iteration: int
    restart_iteration: int
    iterations_lost: int
    probes: int
    checks: list = field(default_factory=list)


def check_iteration_consistency(snapshot, ca, j, tol=1e-8):
    """Test whether history row j in the snapshot is complete and coherent.

    Row 0 is persist-initialized and passes by construction.  For j >= 1 an
    exactly-zero direction or product row means the row never reached NVM,
    which the normalized orthogonality residual alone cannot see.
    """
    p_j = ca.row_from_snapshot(ca.p, snapshot, j)
    q_j = ca.row_from_snapshot(ca.q, snapshot, j)
    r_j = ca.row_from_snapshot(ca.r, snapshot, j)
    z_j = ca.row_from_snapshot(ca.z, snapshot, j)
    problem = ca.problem_from_snapshot(snapshot)

    p_norm = float(np.linalg.norm(p_j))
    q_norm = float(np.linalg.norm(q_j))
    orth = abs(float(np.dot(p_j, q_j))) / (p_norm * q_norm + _EPS)
    b_norm = float(np.linalg.norm(problem.b))
    eq = float(np.linalg.norm(r_j - (problem.b - problem.matvec(z_j)))) / (b_norm + _EPS)

    if j == 0:
        consistent = True
    else:
        consistent = orth <= tol and eq <= tol and p_norm > 0.0 and q_norm > 0.0
    return ConsistencyCheck(j, consistent, orth, eq)


def detect_restart(snapshot, ca, tol=1e-8):
    """Scan persisted history backward for the newest consistent iteration."""
    crash_iter = int(ca.iter_counter.read_from_snapshot(snapshot, 0))
    if crash_iter < 0 or crash_iter > ca.max_iters:
        raise ValueError(f"persisted iteration counter {crash_iter} out of range")
    checks = []
    for j in range(crash_iter, -1, -1):
        chk = check_iteration_consistency(snapshot, ca, j, tol)
        checks.append(chk)
        if chk.consistent:
            return RestartReport(
                crash_iteration=crash_iter,
                restart_iteration=j,
                iterations_lost=crash_iter - j,
                probes=len(checks),
                checks=checks,
            )
    raise AssertionError("unreachable: iteration 0 is consistent by construction")


def resume(snapshot, ca, j, fresh_engine, tol=1e-8):
    """Reload iteration-j state from the snapshot and finish the run.

    Re-verifies the chosen iteration before trusting it.  The remaining
    iterations reproduce the uninterrupted run bit-for-bit because the
    reloaded row bytes and the arithmetic order are identical.
    """
    chk = check_iteration_consistency(snapshot, ca, j, tol)
    if not chk.consistent:
        raise InconsistentRestartState(
            f"iteration {j}: orth={chk.orth_residual:.3e} eq={chk.eq_residual:.3e}"
        )
    problem = ca.problem_from_snapshot(snapshot)
    ca2 = CgArena.build(fresh_engine, problem, ca.max_iters)
    n = ca.n
    if j > 0:
        for src, dst in ((ca.p, ca2.p), (ca.q, ca2.q), (ca.r, ca2.r), (ca.z, ca2.z)):
            row = ca.row_from_snapshot(src, snapshot, j)
            dst.persist_init(row, offset=j * n)
    ca2.iter_counter.persist_init([j])
    r_j = ca2.row_from_snapshot(ca2.r, fresh_engine.nvm, j)
    rho = _seq_dot(r_j, r_j)
    last, _ = _cg_loop(ca2, rho, start_iter=j + 1)
    sol = np.array([ca2.z.load(last * n + i) for i in range(n)])
    return CgRunResult(
        completed=True,
        solution=sol,
        iterations_run=last,
        arena=ca2,
    )


def reference_cg(problem, max_iters):
    """Plain numpy CG oracle with the same fixed-iteration semantics."""
    x = problem.x0.copy()
    r = problem.b - problem.matvec(problem.x0)
    p = r.copy()
    rho = float(np.dot(r, r))
    last = 0
    for t in range(1, max_iters + 1):
        if rho == 0.0:
            break
        q = problem.matvec(p)
        pq = float(np.dot(p, q))
        if pq <= 0.0:
            raise NonPositiveCurvature(f"p'Aq = {pq} at iteration {t}")
        alpha = rho / pq
        x = x + alpha * p
        r = r - alpha * q
        rho0 = rho
        rho = float(np.dot(r, r))
        p = r + (rho / rho0) * p
        last = t
    return x, last
