"""Exception types shared across the simulator and workloads."""


class SimError(Exception):
    """Base class for simulator and workload errors."""


class CrashedEngine(SimError):
    """A memory operation was attempted after the engine crashed."""


class OutOfArena(SimError):
    """Address outside any allocated arena range."""


class DuplicateName(SimError):
    """Arena allocation name already in use."""


class AddressSpaceExhausted(SimError):
    """Arena ran out of simulated address space."""


class IndexOutOfRange(SimError):
    """Array index outside the handle's bounds."""


class NonPositiveCurvature(SimError):
    """p'Aq <= 0 during CG; the input matrix is not positive definite."""


class InconsistentRestartState(SimError):
    """Chosen CG restart iteration failed re-verification."""


class ShapeMismatch(SimError):
    """Matrix shapes incompatible with the requested operation."""


class DivisibilityViolation(SimError):
    """Rank-update width does not divide the checksummed dimension."""


class UnreadablePhase(SimError):
    """Persisted progress scalars are outside their valid range."""


class DegenerateVector(SimError):
    """All cross-section values are zero; no interaction can be selected."""


class NoCommittedCheckpoint(SimError):
    """Restore requested but no checkpoint ever committed."""
