"""Exception hierarchy shared across the package.

Each error class carries the CLI exit code so the command-line front end can
map failures to machine-parsable statuses without inspecting messages.
"""


class SarslideError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    code = "error"


class ConfigError(SarslideError):
    """Invalid configuration: bad fields, unknown keys, inconsistent values."""

    exit_code = 2
    code = "config"


class DataError(SarslideError):
    """Invalid or inconsistent data: bad shapes, leakage, missing inputs."""

    exit_code = 3
    code = "data"


class FormatError(DataError):
    """Malformed on-disk artifact (chip file, manifest, checkpoint)."""

    exit_code = 3
    code = "format"


class TrainingError(SarslideError):
    """Training failure: divergence, NaN gradients, empty datasets."""

    exit_code = 4
    code = "training"
