"""Exception taxonomy shared across the stack.

Contract violations raise these instead of bare asserts so callers can
distinguish "you called me wrong" (ShapeError, ScheduleError, ...) from
"the session hit a recoverable protocol problem" (ProtocolError).
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class MaskError(ValueError):
    """Mask construction arguments are invalid (empty sequence, bad window)."""


class ConfigError(ValueError):
    """A configuration value is out of contract (unknown ref type, odd dims)."""


class ScheduleError(ValueError):
    """A timestep vector violates the few-step schedule contract."""


class CacheMissError(KeyError):
    """A retained cache entry is absent when a window is assembled."""


class CacheContractError(ValueError):
    """Cache mutation violates the store's contract (duplicate insert, variant mix)."""


class AudioUnderrunError(ValueError):
    """The audio buffer does not cover the requested chunk's current second."""


class ProtocolError(ValueError):
    """A wire message is malformed or illegal in the current session state."""
