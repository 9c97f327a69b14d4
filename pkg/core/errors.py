"""
Exception hierarchy for CollapseLab.

Library code raises these; only the command-line runner turns them into
process exit codes (validation 1, numerical 2, acceptance 3).
"""


class CollapseLabError(Exception):
    """Base class for all errors raised by CollapseLab."""

    exit_code = 2


class ValidationError(CollapseLabError):
    """Bad input: configuration, domains, shapes, preconditions."""

    exit_code = 1


class NumericalError(CollapseLabError):
    """A computation broke down on valid input."""

    exit_code = 2


class AcceptanceError(CollapseLabError):
    """The computation succeeded but a checked property failed."""

    exit_code = 3


class ConfigError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ChartError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class PerpendicularError(ValidationError):
    pass


class InvariantError(ValidationError):
    pass


class CoverageError(ValidationError):
    pass


class DegeneratePlaneError(ValidationError):
    pass


class DegenerateError(NumericalError):
    pass


class PositivityError(NumericalError):
    pass


class ObstructionError(NumericalError):
    pass


class HolomorphyError(NumericalError):
    pass


class CompatibilityError(NumericalError):
    pass


class _SolverFailure(NumericalError):
    """Solver failure carrying the last iterate reached."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class PositivityLossError(_SolverFailure):
    pass


class NonConvergence(_SolverFailure):
    pass
