"""Exception hierarchy shared by all modules and mapped to CLI exit codes."""


class MSGateError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(MSGateError, ValueError):
    """Invalid or missing configuration field."""

    exit_code = 4

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def to_dict(self):
        d = super().to_dict()
        if self.field is not None:
            d["field"] = self.field
        return d


class InstabilityError(MSGateError):
    """Linear chain is unstable at the requested trap frequencies."""

    exit_code = 2

    def __init__(self, message, mode=None, eigenvalue=None):
        super().__init__(message)
        self.mode = mode
        self.eigenvalue = eigenvalue

    def to_dict(self):
        d = super().to_dict()
        if self.mode is not None:
            d["mode"] = int(self.mode)
            d["eigenvalue"] = float(self.eigenvalue)
        return d


class InfeasibleError(MSGateError):
    """Gate conditions have no solution at the requested (t_gate, mu)."""

    exit_code = 2

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value

    def to_dict(self):
        d = super().to_dict()
        if self.smallest_singular_value is not None:
            d["smallest_singular_value"] = self.smallest_singular_value
        return d


class PhaseUnreachableError(InfeasibleError):
    """No nullspace direction yields the requested sign of spin-spin phase."""


class OutsideAllowedAreaError(InfeasibleError):
    """Linear pulse amplitude exceeds the maximum of the carrier transform."""

    def __init__(self, message, worst_time=None, margin=None):
        super().__init__(message)
        self.worst_time = worst_time
        self.margin = margin

    def to_dict(self):
        d = super().to_dict()
        d["worst_time"] = self.worst_time
        d["margin"] = self.margin
        return d


class ConvergenceError(MSGateError):
    """Iterative or time-stepping procedure did not converge."""

    exit_code = 3

    def __init__(self, message, values=None):
        super().__init__(message)
        self.values = values

    def to_dict(self):
        d = super().to_dict()
        if self.values is not None:
            d["values"] = list(self.values)
        return d


class OutOfDomainError(MSGateError, ValueError):
    """Pulse evaluated outside its gate interval."""

    exit_code = 4


class SizeError(MSGateError):
    """Simulation Hilbert space exceeds the configured memory cap."""

    exit_code = 4

    def __init__(self, message, suggested_cutoffs=None):
        super().__init__(message)
        self.suggested_cutoffs = suggested_cutoffs

    def to_dict(self):
        d = super().to_dict()
        if self.suggested_cutoffs is not None:
            d["suggested_cutoffs"] = [int(c) for c in self.suggested_cutoffs]
        return d
