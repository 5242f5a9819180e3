"""Exception types raised by the solvers and mapped to CLI exit codes."""


class FBSplitError(Exception):
    exit_code = 1


class ConfigError(FBSplitError, ValueError):
    exit_code = 2


class CFLError(FBSplitError):
    """Raised when the finite-difference transport would run with c* >= 1."""

    exit_code = 3


class MemoryBudgetError(FBSplitError):
    exit_code = 4


class GridMismatchError(FBSplitError, ValueError):
    exit_code = 5


class RateExperimentError(FBSplitError):
    exit_code = 6


class StructuralViolation(FBSplitError):
    exit_code = 7


class TrainingDivergedError(FBSplitError, FloatingPointError):
    exit_code = 8
