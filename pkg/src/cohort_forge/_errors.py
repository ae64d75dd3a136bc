"""Exception types carrying machine-readable error codes."""


class CohortForgeError(Exception):
    """Base error. ``code`` is a stable upper-case identifier such as ``EMPTY_MASK``."""

    exit_code = 2

    def __init__(self, code, message=None):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class ValidationError(CohortForgeError, ValueError):
    """Invalid input or configuration (CLI exit code 1)."""

    exit_code = 1


class NumericalError(CohortForgeError, RuntimeError):
    """Numerical or runtime failure (CLI exit code 2)."""

    exit_code = 2
