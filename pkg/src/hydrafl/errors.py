"""Exception hierarchy. Each error carries the CLI exit category it maps to."""

from __future__ import annotations


class HydraError(Exception):
    category = "config"


class ConfigError(HydraError, ValueError):
    """Inconsistent shapes, layouts or configuration values."""

    category = "config"


class InputError(HydraError, ValueError):
    """Bad data handed to an operation (labels out of range, empty sets)."""

    category = "config"


class NumericError(HydraError, ArithmeticError):
    """Non-finite values or undefined quantities (zero-norm cosine)."""

    category = "numeric"


class FormatError(HydraError, ValueError):
    """Malformed binary/CSV input; ``offset`` is the byte position of the fault."""

    category = "io"

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path
