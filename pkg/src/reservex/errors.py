"""Exception hierarchy shared by all modules."""


class ReservexError(Exception):
    """Base class for every error raised by the package."""


class ParseError(ReservexError):
    """A case file could not be read or decoded."""


class ValidationError(ReservexError):
    """A case violates a data invariant; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class SolverFailure(ReservexError):
    """The optimization backend errored or returned an unusable status."""


class InfeasibleMarket(ReservexError):
    """A market-clearing LP has no feasible solution."""


class BigMViolation(ReservexError):
    """A complementarity pair kept binding at its big-M bound after all retries."""


class ConsistencyFailure(ReservexError):
    """Embedded lower-level values disagree with direct LP re-solves."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class IncompleteTable(ReservexError):
    """A mechanism needs the full coalition table but entries are missing."""


class DegenerateStage(ReservexError):
    """The nucleolus could not identify which coalitions to fix."""


class IterationLimit(ReservexError):
    """Constraint generation stopped before certifying optimality."""

    def __init__(self, message: str, incumbent=None, gap: float | None = None):
        super().__init__(message)
        self.incumbent = incumbent
        self.gap = gap


class ZeroGrandValue(ReservexError):
    """Scenario shares are undefined because the grand-coalition value is zero."""
