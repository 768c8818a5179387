class PlannerError(Exception):
    """Base class for all planner errors."""


class ValidationError(PlannerError, ValueError):
    pass


class ParseError(PlannerError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleError(PlannerError):
    """No assignment satisfies the memory constraints."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class UnknownSchemeError(PlannerError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown scheme"


class BudgetExhausted(PlannerError):
    """Search stopped at its node budget; ``incumbent`` holds the best plan found."""

    def __init__(self, message, incumbent=None):
        super().__init__(message)
        self.incumbent = incumbent


class AuditError(PlannerError):
    pass
