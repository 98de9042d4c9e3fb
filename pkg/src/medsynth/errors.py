"""Exception types shared across the package."""


class MedsynthError(Exception):
    """Base class for all package errors."""


class ValidationError(MedsynthError):
    """An input violated a documented precondition."""


class DivergenceError(MedsynthError):
    """Training produced non-finite or runaway losses."""


class FingerprintError(MedsynthError):
    """Two artifacts built with different frozen encoders were compared."""
