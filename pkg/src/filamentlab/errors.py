"""Exception hierarchy shared across the package.

Two families matter to callers (and to the CLI exit codes): violations of
documented preconditions (bad input, caught before heavy compute) and
numerical failures detected mid-computation.
"""


class FilamentLabError(Exception):
    """Base class for all package errors."""


class PreconditionError(FilamentLabError):
    """Input rejected before any numerical work was done."""


class InvalidParameterError(PreconditionError):
    pass


class SingularEvaluationError(PreconditionError):
    """Evaluation requested at a point where the operation is undefined."""


class InvalidMatchingError(PreconditionError):
    """Matched-loop metric requested for loops whose weights disagree."""


class UnsupportedTargetError(PreconditionError):
    """Filament sampling asked for a vorticity target it cannot handle."""


class SnapshotFormatError(PreconditionError):
    """A snapshot file is malformed: bad magic, truncation, or size lies."""


class NumericalError(FilamentLabError):
    """Computation started but produced an unusable result."""


class ConstructionError(NumericalError):
    """A tabulation or build step failed an internal consistency check."""


class RemeshError(NumericalError):
    """Uniform-arclength resampling of a filament failed."""


class TracerDivergedError(NumericalError):
    """A passive tracer left the configured domain guard."""


class NonFiniteVelocityError(NumericalError):
    """A velocity evaluation returned NaN/Inf.  Carries the offender."""

    def __init__(self, message, filament_id=None, node_index=None):
        super().__init__(message)
        self.filament_id = filament_id
        self.node_index = node_index


class StepRejectedError(NumericalError):
    """Time step violated its stability guard.  Carries an admissible dt."""

    def __init__(self, message, admissible_dt):
        super().__init__(message)
        self.admissible_dt = admissible_dt


class SimulationAborted(NumericalError):
    """A run failed mid-way; the partial trajectory is attached."""

    def __init__(self, message, trajectory, cause):
        super().__init__(message)
        self.trajectory = trajectory
        self.cause = cause
