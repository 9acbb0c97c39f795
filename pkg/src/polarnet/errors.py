"""Shared error types, mapped onto CLI exit codes (2/3/4)."""


class ConfigError(ValueError):
    """Invalid parameters or configuration; CLI exit code 2."""


class DataError(RuntimeError):
    """Unreadable or inconsistent input data; CLI exit code 3."""
