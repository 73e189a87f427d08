"""Exception types shared across the package."""


class DataLoadError(ValueError):
    """A dataset or embedding file violates its documented format."""


class NumericError(ValueError):
    """A numeric routine received input outside its domain."""


class FitError(ValueError):
    """A detector could not be fitted on the provided data."""


class CalibrationError(ValueError):
    """Threshold calibration received a degenerate score set."""


class ConfigError(ValueError):
    """An invalid or internally inconsistent run configuration."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss or parameter."""


class StateError(RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class VersionError(ValueError):
    """A serialized artifact has an unsupported format version."""


class BenchmarkWarning(UserWarning):
    """Benchmark conditions are too weak for stable timing."""
