"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 1, data/ingestion problems with 2, and training failures with 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value, or inconsistent settings."""


class DataError(ValueError):
    """Dataset ingestion failure: missing file, bad header, label overflow."""


class DimensionError(ValueError):
    """Tensor width/shape mismatch between caller and component."""


class ProtocolError(RuntimeError):
    """Incremental-learning protocol violated (e.g. phase 2 before phase 1)."""


class TrainingError(RuntimeError):
    """Training produced an unusable state (non-finite loss, etc.)."""
