"""Error types shared across the package.

Every failure carries a short machine-readable ``code`` (e.g. ``"BAD_MAGIC"``)
so callers and the CLI can branch on it without parsing messages.
"""


class OddaError(Exception):
    """Base error with a stable code string."""

    code = "ODDA_ERROR"

    def __init__(self, code, message=""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class DataError(OddaError):
    """Bad or missing input data (audio, manifests, checkpoints)."""


class ConfigError(OddaError):
    """Invalid configuration or argument values."""
