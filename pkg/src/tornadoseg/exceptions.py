"""Exception hierarchy shared by every module."""


class TornadoError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(TornadoError, ValueError):
    """A binary file does not match its expected layout."""


class MappingError(TornadoError, KeyError):
    """A raw label ID has no entry in the class mapping."""


class ContractError(TornadoError, ValueError):
    """Shapes, axes or arguments violate an operation's preconditions."""


class ConfigError(TornadoError, ValueError):
    """A configuration file or override could not be parsed or validated."""


class DivergenceError(TornadoError, RuntimeError):
    """Training produced a non-finite loss."""


class EmptyMaskWarning(UserWarning):
    """A loss was evaluated with no valid pixels and returned zero."""
