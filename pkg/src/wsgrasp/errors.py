"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GraspError(Exception):
    exit_code = 1


class UsageError(GraspError):
    exit_code = 2


class DomainError(GraspError, ValueError):
    """Argument outside the operation's domain (shapes, limits, counts)."""
    exit_code = 2


class FormatError(GraspError):
    """Malformed file or record."""
    exit_code = 3


class StructuralError(FormatError):
    """Well-formed input with inconsistent structure (bad index, empty mesh)."""


class SamplingError(GraspError):
    exit_code = 3


class NumericError(GraspError, ArithmeticError):
    exit_code = 4


class SingularityError(NumericError):
    """Closed-loop linkage cannot be assembled at the requested joint values."""
