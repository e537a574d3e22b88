"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to.
"""


class ClapError(Exception):
    exit_code = 1


class ConfigError(ClapError):
    """Bad configuration, shape mismatch or invalid argument."""

    exit_code = 1


class UsageError(ClapError):
    """API used out of order (e.g. backward through a consumed graph)."""

    exit_code = 1


class DataError(ClapError):
    """Unreadable, truncated or invariant-violating data files."""

    exit_code = 2


class NumericalError(ClapError):
    """Non-finite losses or gradients."""

    exit_code = 3

    def __init__(self, message, path=None, metrics=None):
        super().__init__(message)
        self.path = path
        self.metrics = metrics or {}
