"""Exception types shared across the package.

Every error raised by a public operation carries the module and operation
name so the CLI can report ``module.op: message`` on stderr and map the
error class to a stable exit code.
"""


class MedtexError(Exception):
    """Base class; ``module`` and ``op`` locate the failing operation."""

    def __init__(self, module: str, op: str, message: str):
        self.module = module
        self.op = op
        super().__init__(f"{module}.{op}: {message}")


class ValidationError(MedtexError):
    """Bad argument values or shapes (CLI exit code 2)."""


class FormatError(MedtexError):
    """Corrupt, truncated or mismatched files (CLI exit code 3)."""


class DivergenceError(MedtexError):
    """Training produced a non-finite loss (CLI exit code 1)."""
