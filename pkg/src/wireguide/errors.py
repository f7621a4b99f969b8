"""Exception types raised by the library."""


class WireGuideError(Exception):
    """Base class for all library errors."""


class NoSideTrapError(WireGuideError, ValueError):
    pass


class TrapInsideWireError(NoSideTrapError):
    pass


class IntegrationError(WireGuideError, ArithmeticError):
    """Trajectory blew up; carries the last time with a finite state."""

    def __init__(self, message: str, last_valid_time: float, atom_index: int | None = None):
        super().__init__(message)
        self.last_valid_time = last_valid_time
        self.atom_index = atom_index


class ConfigError(WireGuideError, ValueError):
    pass
