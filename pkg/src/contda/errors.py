"""Exception taxonomy shared across the package.

Each class carries a short machine-readable ``category`` used by the CLI
to derive exit codes.
"""


class ContdaError(Exception):
    category = "error"


class InputValidationError(ContdaError, ValueError):
    """Bad values passed to an operation (shapes, ranges, non-finite data)."""

    category = "input"


class DatasetValidationError(ContdaError, ValueError):
    """Dataset violates a structural precondition (empty class, bad layout)."""

    category = "dataset"


class ConfigurationError(ContdaError, ValueError):
    """Inconsistent or unknown configuration (keys, method/buffer mismatch)."""

    category = "config"


class CheckpointMismatchError(ConfigurationError):
    """Checkpoint incompatible with the requested model (class count, backbone)."""

    category = "checkpoint"
