"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented exit statuses without inspecting message text.
"""

from __future__ import annotations


class PooledLogitError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(PooledLogitError, ValueError):
    exit_code = 2


class NumericalError(PooledLogitError, ArithmeticError):
    exit_code = 3


class ProtocolError(PooledLogitError):
    exit_code = 4


# model
class MissingCovariate(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class DomainError(ValidationError):
    pass


class StrictModePrivacyViolation(ValidationError):
    pass


# pooling
class InfeasibleSizes(ValidationError):
    pass


class PrivacyError(ValidationError):
    pass


class MissingRecord(ValidationError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class TooFewSubjects(ValidationError):
    pass


# glm
class Separation(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NotNested(ValidationError):
    pass


class RowMismatch(ValidationError):
    pass


class NoPrevalence(ValidationError):
    pass


# securesum
class UnassignedSubject(ValidationError):
    pass


class IncompleteMasks(ProtocolError):
    pass


# protocol
class NodeTimeout(ProtocolError):
    pass


class PlanInfeasible(ProtocolError):
    pass


class AggregationIncomplete(ProtocolError):
    pass


class UnknownPool(ProtocolError):
    pass


class UpstreamTimeout(ProtocolError):
    pass


class SpecRejected(ProtocolError):
    pass


class SessionExpired(ProtocolError):
    pass


# simulate / io
class ArmMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
