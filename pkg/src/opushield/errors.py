"""Exception hierarchy shared by every opushield module."""


class OpushieldError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(OpushieldError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(InvalidArgumentError):
    """Array shapes do not chain."""


class StateError(OpushieldError, RuntimeError):
    """Operation requested in an invalid object state (e.g. uncalibrated OPU)."""


class CapabilityDisabledError(OpushieldError, RuntimeError):
    """A test-only capability was requested while locked (release mode)."""


class CalibrationError(OpushieldError, ValueError):
    """Quantization calibration failed (degenerate calibration batch)."""


class TrainingDivergedError(OpushieldError, RuntimeError):
    """Loss became NaN/Inf during training; carries diagnostics."""


class DataError(OpushieldError, ValueError):
    """Dataset content failed validation."""


class IdxParseError(DataError):
    """IDX file is malformed; `offset` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(OpushieldError, ValueError):
    """Experiment configuration is invalid."""


class ReportSchemaError(ConfigError):
    """Persisted report has an unsupported schema version; migrate explicitly."""
