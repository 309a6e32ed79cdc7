"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class GeoflowError(Exception):
    code = "geoflow_error"


class GridMismatchError(GeoflowError, ValueError):
    code = "grid_mismatch"


class DimensionMismatchError(GeoflowError, ValueError):
    code = "dimension_mismatch"


class BlowUpError(GeoflowError, ArithmeticError):
    """Non-finite state during geodesic integration."""

    code = "blow_up"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RegistrationError(GeoflowError):
    code = "registration_failed"


class FoldError(GeoflowError):
    """A deformation with non-positive Jacobian determinant was produced."""

    code = "fold_detected"


class SamplingError(GeoflowError, ValueError):
    code = "sampling_error"


class PipelineError(GeoflowError):
    code = "pipeline_error"


class ConfigError(GeoflowError, ValueError):
    code = "config_invalid"


class FieldFileError(GeoflowError, IOError):
    code = "field_file_error"


class BadMagicError(FieldFileError):
    code = "bad_magic"


class TruncatedPayloadError(FieldFileError):
    code = "truncated_payload"


class KindMismatchError(FieldFileError):
    code = "kind_mismatch"


class DtypeMismatchError(FieldFileError):
    code = "dtype_mismatch"


class ExportError(GeoflowError, ValueError):
    code = "export_error"
