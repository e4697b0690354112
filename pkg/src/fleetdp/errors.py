"""Exception hierarchy shared by every module."""


class FleetDPError(Exception):
    """Base class for all errors raised by fleetdp."""


class ConstraintViolation(FleetDPError):
    """An action breaks a fleet constraint (SoC, rate, site cap, reversal)."""

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations) or "constraint violation"
        super().__init__(msg)


class Infeasible(FleetDPError):
    """No admissible schedule reaches the terminal set."""


class SizeLimit(FleetDPError):
    """Instance too large for the exact solver guards."""


class BudgetExceeded(FleetDPError):
    """Enumeration would exceed the configured sequence budget."""


class DataError(FleetDPError):
    """Malformed input file (CSV, JSON) or inconsistent data."""


class EmptyScenario(DataError):
    """Input file contained no data rows."""


class DegenerateData(FleetDPError):
    """Training data cannot support feature selection or training."""


class ModelFormatError(DataError):
    """Model file is unreadable or has an unsupported version."""
