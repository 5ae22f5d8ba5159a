"""Exception hierarchy shared by the library and the CLI."""


class VolterraKrmError(Exception):
    """Base class for all library errors."""


class SizeExceeded(VolterraKrmError):
    """A dense object would exceed the materialization guard."""


class InsufficientData(VolterraKrmError):
    """The input series is too short for the requested memory length."""


class SeparationCheckFailed(VolterraKrmError):
    """An input descriptor does not reproduce the signal on its grid."""


class SingularCore(VolterraKrmError):
    """The small core system of a low-rank solve is numerically singular."""


class NonFinite(VolterraKrmError):
    """An objective evaluation produced NaN or infinity."""


class AllRestartsFailed(VolterraKrmError):
    """Every optimizer restart failed at its initial point."""


class DegenerateFirstOrder(VolterraKrmError):
    """The estimated first-order map is numerically zero."""


class NonPolynomial(VolterraKrmError):
    """Volterra maps were requested for a non-polynomial nonlinearity."""


class ZeroSignal(VolterraKrmError):
    """A signal with zero variance was given where power is required."""


class ConstraintUnsatisfiable(VolterraKrmError):
    """Rejection sampling hit its attempt cap."""


class DegenerateReference(VolterraKrmError):
    """A fit metric was asked to normalize by a constant reference."""
