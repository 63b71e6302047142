"""Exception types shared across the package and mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


class FormatError(ValueError):
    """Malformed file content (CLI exit code 3)."""


class NumericalError(ArithmeticError):
    """Non-finite values detected in a numeric pipeline stage (CLI exit code 4)."""
