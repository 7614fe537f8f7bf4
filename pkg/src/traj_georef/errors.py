"""Exception types raised across the package."""


class GeorefError(Exception):
    """Base class for all errors raised by traj_georef."""


class IncompatibleMatch(GeorefError):
    """Feature and landmark differ in kind (pole vs segment) or marking class."""


class NumericalFailure(GeorefError):
    """The damped normal equations could not be solved."""


class InsufficientCandidates(GeorefError):
    """A window lacks the two features / two landmarks needed for a hypothesis."""


class EmptyInput(GeorefError):
    pass


class ValidationError(GeorefError, ValueError):
    """Input violates a model invariant."""


class ParseError(GeorefError, ValueError):
    """Input file could not be parsed."""


class LengthMismatch(GeorefError, ValueError):
    pass


class ConfigError(GeorefError, ValueError):
    pass


class NoMatchesWarning(UserWarning):
    """Alignment ran without feature constraints; output equals the initialization."""


class IoError(GeorefError, OSError):
    """An input or output file could not be read or written."""
