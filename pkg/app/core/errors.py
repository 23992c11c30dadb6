class GridGuardError(Exception):
    pass


class CaseFormatError(GridGuardError):
    """Malformed case file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CapacityRuleError(GridGuardError):
    pass


class ReportError(GridGuardError):
    pass


class GridError(GridGuardError):
    pass


class LpModelError(GridGuardError):
    pass


class LpNumericalError(GridGuardError):
    pass


class DroopError(GridGuardError):
    pass


class ReserveInfeasibleError(GridGuardError):
    def __init__(self, message: str, buses: list[int]):
        self.buses = buses
        super().__init__(message)


class ShortfallError(GridGuardError):
    pass


class CostModelError(GridGuardError):
    pass


class DispatchError(GridGuardError):
    pass


class ImmuneConvergenceError(GridGuardError):
    def __init__(self, message: str, last_dispatch=None):
        self.last_dispatch = last_dispatch
        super().__init__(message)


class BruteForceLimitError(GridGuardError):
    pass


class ControllerConditionError(GridGuardError):
    pass


class AlphaBoundError(GridGuardError):
    pass


class RunHistoryError(GridGuardError):
    pass
