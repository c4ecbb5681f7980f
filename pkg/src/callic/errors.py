"""Exception hierarchy shared by the codec modules.

Each class maps to one CLI exit status (see ``callic.cli``).
"""


class CallicError(Exception):
    exit_code = 1


class ConfigError(CallicError, ValueError):
    """Invalid configuration value (even kernel, empty mask, d >= 1, ...)."""

    exit_code = 2


class DimensionError(CallicError, ValueError):
    exit_code = 2


class NumericFault(CallicError, ArithmeticError):
    """A forward pass produced NaN or Inf."""

    exit_code = 6


class ProtocolError(CallicError):
    """Out-of-order use of a stateful object (e.g. a skipped CCI step)."""


class DecodeError(CallicError):
    """Entropy-coded stream ended early or is inconsistent."""

    exit_code = 4


class FormatError(CallicError):
    """Unsupported or malformed container / checkpoint bytes."""

    exit_code = 4


class TruncatedError(FormatError, DecodeError):
    exit_code = 4


class WrongModelError(CallicError):
    """Container was produced with a different checkpoint or adapter config."""

    exit_code = 5


class CorruptCheckpointError(FormatError):
    pass
