"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text.
"""


class GamaError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(GamaError):
    """Invalid or contradictory configuration (CLI exit code 2)."""


class DataFormatError(GamaError):
    """Corrupt, truncated, or wrong-magic artifact files (CLI exit code 3)."""


class CompatibilityError(GamaError):
    """Artifacts that do not fit together: wrong embedding width,
    stale encoder fingerprint, distribution mismatch (CLI exit code 4)."""


class AutodiffError(GamaError):
    """Non-finite values or a malformed backward call inside the tape engine."""
