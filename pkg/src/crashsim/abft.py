"""Checksummed matrix multiplication with crash recovery.

Inputs are encoded with an extra column-sum row (A) and row-sum column
(B); the product then carries both checksum relations in every
intermediate.  The multiply runs as two loops: rank-k submatrix products
into per-step temporaries whose checksum row/column are flushed, then
row-block additions into an accumulator whose row-checksum elements are
flushed.  After a crash, the persisted checksums locate stale blocks;
single corrupted elements are repaired in place and anything else is
recomputed.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .arena import Arena
from .errors import DivisibilityViolation, ShapeMismatch, UnreadablePhase
from .simcore import CrashFired, CrashPlan

_F64 = struct.Struct("<d")

SUBMULT_LABEL = "submult_end"
SUBADD_LABEL = "subadd_end"

PHASE_INIT = 0
PHASE_MULTIPLY = 1
PHASE_ADD = 2
PHASE_FINAL = 3
PHASE_DONE = 4


@dataclass(frozen=True)
class AbftConfig:
    n: int
    k: int
    tol: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise DivisibilityViolation("rank width must be >= 1")
        if (self.n + 1) % self.k:
            raise DivisibilityViolation(f"(n+1)={self.n + 1} not divisible by k={self.k}")

    @property
    def num_submults(self):
        return (self.n + 1) // self.k


@dataclass
class CheckedMatrix:
    """Matrix values carrying checksum row and/or column."""

    values: np.ndarray
    kind: str  # "column", "row", or "full"


def encode_column_checksum(a):
    """Append a row of column sums (checksum vector of all ones)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ShapeMismatch("expected a 2-D matrix")
    return CheckedMatrix(np.vstack([a, a.sum(axis=0)]), "column")


def encode_row_checksum(b):
    """Append a column of row sums (checksum vector of all ones)."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise ShapeMismatch("expected a 2-D matrix")
    return CheckedMatrix(np.hstack([b, b.sum(axis=1, keepdims=True)]), "row")


def encode_full(c):
    """Append both checksum row and column to a plain result matrix."""
    c = np.asarray(c, dtype=float)
    with_col = np.hstack([c, c.sum(axis=1, keepdims=True)])
    return CheckedMatrix(np.vstack([with_col, with_col.sum(axis=0)]), "full")


@dataclass
class ChecksumViolations:
    bad_rows: set
    bad_cols: set
    correctable: list
    row_defects: dict = field(default_factory=dict)
    col_defects: dict = field(default_factory=dict)

    @property
    def clean(self):
        return not self.bad_rows and not self.bad_cols


def verify_checksums(values, tol=1e-8):
    """Check both checksum relations of a fully checksummed matrix.

    A row (column) is bad when its last element differs from the sum of
    its data elements by more than tol * (sum of |data| + 1).  A single
    corrupted element shows up as exactly one bad row crossing one bad
    column with matching defect magnitudes.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2 or values.shape[1] < 2:
        raise ShapeMismatch(f"not a checksummed matrix: shape {values.shape}")
    data_rows = values[:, :-1]
    data_cols = values[:-1, :]
    row_defect = values[:, -1] - data_rows.sum(axis=1)
    col_defect = values[-1, :] - data_cols.sum(axis=0)
    row_scale = np.abs(data_rows).sum(axis=1) + 1.0
    col_scale = np.abs(data_cols).sum(axis=0) + 1.0
    bad_rows = set(np.nonzero(np.abs(row_defect) > tol * row_scale)[0].tolist())
    bad_cols = set(np.nonzero(np.abs(col_defect) > tol * col_scale)[0].tolist())

    correctable = []
    if len(bad_rows) == 1 and len(bad_cols) == 1:
        r = next(iter(bad_rows))
        c = next(iter(bad_cols))
        # a single bad element shifts its row and column sums by the same amount
        scale = max(row_scale[r], col_scale[c])
        if abs(abs(row_defect[r]) - abs(col_defect[c])) <= tol * scale:
            correctable.append((r, c))
    return ChecksumViolations(
        bad_rows,
        bad_cols,
        correctable,
        {int(i): float(row_defect[i]) for i in bad_rows},
        {int(j): float(col_defect[j]) for j in bad_cols},
    )


def correct_single_errors(values, violations, tol=1e-8):
    """Repair uniquely localized elements via their row relation.

    Returns (corrected values, corrected positions, residual violations).
    Anything the checksums cannot localize is left untouched.
    """
    values = np.asarray(values, dtype=float).copy()
    corrected = []
    for (r, c) in violations.correctable:
        if c == values.shape[1] - 1:
            values[r, c] = values[r, :-1].sum()
        else:
            others = values[r, :-1].sum() - values[r, c]
            values[r, c] = values[r, -1] - others
        corrected.append((r, c))
    residual = verify_checksums(values, tol)
    return values, corrected, residual


class AbftArena:
    """Persistent state of one checksummed multiply run."""

    def __init__(self, engine, config):
        self.engine = engine
        self.config = config
        m = config.n + 1
        self.m = m
        arena = Arena(engine)
        self.arena = arena
        self.a_c = arena.alloc_array("A_c", "f64", m * m)
        self.b_r = arena.alloc_array("B_r", "f64", m * m)
        self.temps = [
            arena.alloc_array(f"C_temp_{s}", "f64", m * m)
            for s in range(1, config.num_submults + 1)
        ]
        self.c_temp = arena.alloc_array("C_accum", "f64", m * m)
        self.c_f = arena.alloc_array("C_final", "f64", m * m)
        self.phase = arena.alloc_scalar("phase", "i64")
        self.s_prog = arena.alloc_scalar("submult_progress", "i64")
        self.i_prog = arena.alloc_scalar("addition_progress", "i64")

    def persist_inputs(self, a, b):
        m = self.m
        n = self.config.n
        a_c = np.zeros((m, m))
        a_c[:, :n] = encode_column_checksum(a).values
        b_r = np.zeros((m, m))
        b_r[:n, :] = encode_row_checksum(b).values
        self.a_c.persist_init(a_c.ravel())
        self.b_r.persist_init(b_r.ravel())
        self.phase.persist_init([PHASE_INIT])
        self.s_prog.persist_init([0])
        self.i_prog.persist_init([0])

    def matrix_from_snapshot(self, handle, snapshot):
        return handle.snapshot_all(snapshot).reshape(self.m, self.m)

    def checksum_flush_lines(self, handle):
        """Distinct line addresses covering the checksum row and column."""
        m = self.m
        ls = self.engine.config.line_size
        base = handle.base_address
        lines = set()
        row_start = base + 8 * (m - 1) * m
        for byte in range(row_start, row_start + 8 * m, 8):
            lines.add(byte - byte % ls)
        for j in range(m):
            byte = base + 8 * (j * m + m - 1)
            lines.add(byte - byte % ls)
        return sorted(lines)

    def rowblock_flush_lines(self, block):
        """Distinct lines of the accumulator's row-checksum elements in block."""
        m = self.m
        k = self.config.k
        ls = self.engine.config.line_size
        base = self.c_temp.base_address
        lines = set()
        for row in range((block - 1) * k, block * k):
            byte = base + 8 * (row * m + m - 1)
            lines.add(byte - byte % ls)
        return sorted(lines)


@dataclass
class AbftRunResult:
    completed: bool
    c_full: np.ndarray | None
    arena: AbftArena
    snapshot: object = None


def _store_flush(handle, value):
    handle.store(0, value)
    handle.flush_element(0)


def _run_submult(aa, s):
    """Compute one rank-k product into its temporary and flush checksums."""
    eng = aa.engine
    read = eng.read
    write = eng.write
    unp = _F64.unpack
    pck = _F64.pack
    m = aa.m
    k = aa.config.k
    lo = (s - 1) * k
    a_base = aa.a_c.base_address
    b_base = aa.b_r.base_address
    t_base = aa.temps[s - 1].base_address
    a_handle = aa.a_c
    for i in range(m):
        a_row = a_handle.load_block(i * m + lo, k)
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a_row[t] * unp(read(b_base + 8 * ((lo + t) * m + j), 8))[0]
            write(t_base + 8 * (i * m + j), pck(acc))
    for line in aa.checksum_flush_lines(aa.temps[s - 1]):
        eng.clflush(line)


def _run_addition_block(aa, block):
    """Accumulate one k-row block of all temporaries and flush its checksums."""
    eng = aa.engine
    read = eng.read
    write = eng.write
    unp = _F64.unpack
    pck = _F64.pack
    m = aa.m
    k = aa.config.k
    c_base = aa.c_temp.base_address
    temp_bases = [h.base_address for h in aa.temps]
    for row in range((block - 1) * k, block * k):
        for j in range(m):
            off = 8 * (row * m + j)
            acc = unp(read(c_base + off, 8))[0]
            for tb in temp_bases:
                acc += unp(read(tb + off, 8))[0]
            write(c_base + off, pck(acc))
    for line in aa.rowblock_flush_lines(block):
        eng.clflush(line)


def _run_final_add(aa):
    eng = aa.engine
    read = eng.read
    write = eng.write
    unp = _F64.unpack
    pck = _F64.pack
    m = aa.m
    f_base = aa.c_f.base_address
    c_base = aa.c_temp.base_address
    for off in range(0, 8 * m * m, 8):
        acc = unp(read(f_base + off, 8))[0] + unp(read(c_base + off, 8))[0]
        write(f_base + off, pck(acc))


def _read_result(aa):
    m = aa.m
    return np.array([aa.c_f.load(i) for i in range(m * m)]).reshape(m, m)


def abft_mm_run(a, b, config, engine, crash_plan=None):
    """Run the two-loop checksummed multiply under a crash plan."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (config.n, config.n) or b.shape != (config.n, config.n):
        raise ShapeMismatch(f"expected {config.n}x{config.n} inputs")
    aa = AbftArena(engine, config)
    aa.persist_inputs(a, b)
    engine.set_crash_plan(crash_plan or CrashPlan.never())
    try:
        _store_flush(aa.phase, PHASE_MULTIPLY)
        for s in range(1, config.num_submults + 1):
            _store_flush(aa.s_prog, s)
            _run_submult(aa, s)
            engine.maybe_fire_crash(SUBMULT_LABEL)
        _store_flush(aa.phase, PHASE_ADD)
        for block in range(1, config.num_submults + 1):
            _store_flush(aa.i_prog, block)
            _run_addition_block(aa, block)
            engine.maybe_fire_crash(SUBADD_LABEL)
        _store_flush(aa.phase, PHASE_FINAL)
        _run_final_add(aa)
        _store_flush(aa.phase, PHASE_DONE)
    except CrashFired as cf:
        return AbftRunResult(False, None, aa, snapshot=cf.snapshot)
    return AbftRunResult(True, _read_result(aa), aa)


@dataclass
class RecoveryPlan:
    phase: int
    recompute_submults: set
    pending_submults: set
    correct_submults: set
    recompute_addition_rows: set
    pending_addition_rows: set
    corrected_elements: int

    def summary(self):
        return {
            "phase": self.phase,
            "recompute_submults": sorted(self.recompute_submults),
            "pending_submults": sorted(self.pending_submults),
            "correct_submults": sorted(self.correct_submults),
            "recompute_addition_rows": sorted(self.recompute_addition_rows),
            "pending_addition_rows": sorted(self.pending_addition_rows),
            "corrected_elements": self.corrected_elements,
        }


def _block_rows_consistent(values, block, k, tol):
    m = values.shape[0]
    rows = values[(block - 1) * k: block * k]
    defect = np.abs(rows[:, -1] - rows[:, :-1].sum(axis=1))
    scale = np.abs(rows[:, :-1]).sum(axis=1) + 1.0
    return bool((defect <= tol * scale).all())


def recover(snapshot, aa, config, tol=None):
    """Decide what survives a crash and what must be redone.

    recompute_* lists started work whose persisted state fails its
    checksums; pending_* lists work the crash preempted entirely.
    """
    tol = config.tol if tol is None else tol
    phase = int(aa.phase.read_from_snapshot(snapshot, 0))
    s_prog = int(aa.s_prog.read_from_snapshot(snapshot, 0))
    i_prog = int(aa.i_prog.read_from_snapshot(snapshot, 0))
    total = config.num_submults
    if phase < PHASE_INIT or phase > PHASE_DONE:
        raise UnreadablePhase(f"phase scalar {phase}")
    if s_prog < 0 or s_prog > total or i_prog < 0 or i_prog > total:
        raise UnreadablePhase(f"progress scalars s={s_prog} i={i_prog}")

    started_submults = s_prog if phase == PHASE_MULTIPLY else (total if phase > PHASE_MULTIPLY else 0)
    in_flight_submult = s_prog if phase == PHASE_MULTIPLY else 0
    recompute_s = set()
    correct_s = set()
    corrected_elements = 0
    for s in range(1, started_submults + 1):
        values = aa.matrix_from_snapshot(aa.temps[s - 1], snapshot)
        if s == in_flight_submult and not values.any():
            # nothing reached NVM yet; an all-zero block verifies vacuously
            recompute_s.add(s)
            continue
        violations = verify_checksums(values, tol)
        if violations.clean:
            continue
        if violations.correctable:
            _, fixed, residual = correct_single_errors(values, violations, tol)
            if residual.clean:
                correct_s.add(s)
                corrected_elements += len(fixed)
                continue
        recompute_s.add(s)
    pending_s = set(range(started_submults + 1, total + 1))

    if phase <= PHASE_MULTIPLY:
        recompute_blocks = set()
        pending_blocks = set(range(1, total + 1))
    else:
        started_blocks = i_prog if phase == PHASE_ADD else total
        in_flight_block = i_prog if phase == PHASE_ADD else 0
        c_vals = aa.matrix_from_snapshot(aa.c_temp, snapshot)
        k = config.k
        recompute_blocks = set()
        for blk in range(1, started_blocks + 1):
            rows = c_vals[(blk - 1) * k: blk * k]
            if blk == in_flight_block and not rows.any():
                recompute_blocks.add(blk)
            elif not _block_rows_consistent(c_vals, blk, k, tol):
                recompute_blocks.add(blk)
        pending_blocks = set(range(started_blocks + 1, total + 1))
    return RecoveryPlan(
        phase,
        recompute_s,
        pending_s,
        correct_s,
        recompute_blocks,
        pending_blocks,
        corrected_elements,
    )


def complete_recovery(snapshot, config, fresh_engine, tol=None, plan=None, source_arena=None):
    """Rebuild state from a snapshot, execute the plan, and finish the run.

    The snapshot's consistent blocks are reused as-is; corrected blocks are
    repaired host-side from their checksums; everything else is recomputed
    through the fresh engine.
    """
    tol = config.tol if tol is None else tol
    aa_new = AbftArena(fresh_engine, config)
    if source_arena is None:
        source_arena = aa_new  # identical layout: addresses match
    aa_src = source_arena

    a_c = aa_src.matrix_from_snapshot(aa_src.a_c, snapshot)
    b_r = aa_src.matrix_from_snapshot(aa_src.b_r, snapshot)
    aa_new.a_c.persist_init(a_c.ravel())
    aa_new.b_r.persist_init(b_r.ravel())
    if plan is None:
        plan = recover(snapshot, aa_src, config, tol)

    for s in range(1, config.num_submults + 1):
        if s in plan.recompute_submults or s in plan.pending_submults:
            _run_submult(aa_new, s)
        else:
            values = aa_src.matrix_from_snapshot(aa_src.temps[s - 1], snapshot)
            if s in plan.correct_submults:
                violations = verify_checksums(values, tol)
                values, _, _ = correct_single_errors(values, violations, tol)
            aa_new.temps[s - 1].persist_init(values.ravel())

    kept_blocks = [
        blk
        for blk in range(1, config.num_submults + 1)
        if blk not in plan.recompute_addition_rows and blk not in plan.pending_addition_rows
    ]
    if kept_blocks:
        c_vals = aa_src.matrix_from_snapshot(aa_src.c_temp, snapshot)
        k = config.k
        m = config.n + 1
        keep = np.zeros((m, m))
        for blk in kept_blocks:
            keep[(blk - 1) * k: blk * k] = c_vals[(blk - 1) * k: blk * k]
        aa_new.c_temp.persist_init(keep.ravel())
    for blk in range(1, config.num_submults + 1):
        if blk in plan.recompute_addition_rows or blk in plan.pending_addition_rows:
            _run_addition_block(aa_new, blk)
    _run_final_add(aa_new)
    return _read_result(aa_new), plan


def direct_product_checked(a, b):
    """Independent oracle: plain matrix product with both checksums."""
    return encode_full(np.asarray(a, dtype=float) @ np.asarray(b, dtype=float)).values


# -- matrix file I/O ---------------------------------------------------------

_MAGIC = b"CSIMMAT1"


def save_matrix_binary(path, values):
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ShapeMismatch("binary format stores square matrices")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", values.shape[0]))
        fh.write(values.astype("<f8").tobytes())


def load_matrix_binary(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        (n,) = struct.unpack("<Q", fh.read(8))
        data = np.frombuffer(fh.read(8 * n * n), dtype="<f8")
    return data.reshape(n, n).copy()


def save_matrix_csv(path, values):
    np.savetxt(path, np.asarray(values, dtype=float), delimiter=",")


def load_matrix_csv(path):
    values = np.loadtxt(path, delimiter=",")
    return np.atleast_2d(values)
