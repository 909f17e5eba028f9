"""Exception hierarchy. Each family maps to a CLI exit code."""


class IncGmmError(Exception):
    exit_code = 1
    kind = "error"

    def to_record(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class DataError(IncGmmError):
    exit_code = 2
    kind = "data_error"


class ShapeError(DataError):
    kind = "shape_error"


class InsufficientDataError(DataError):
    kind = "insufficient_data"


class ParseError(DataError):
    kind = "parse_error"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column

    def to_record(self):
        rec = super().to_record()
        rec.update(row=self.row, column=self.column)
        return rec


class UnsupportedVersionError(DataError):
    kind = "unsupported_version"


class NumericalError(IncGmmError):
    exit_code = 3
    kind = "numerical_error"


class SingularCovarianceError(NumericalError):
    kind = "singular_covariance"

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component

    def to_record(self):
        rec = super().to_record()
        rec["component"] = self.component
        return rec


class InvalidModelError(NumericalError):
    kind = "invalid_model"


class DegenerateKError(NumericalError):
    kind = "degenerate_k"


class CalibrationError(NumericalError):
    kind = "calibration_failed"

    def __init__(self, message, best_count=None):
        super().__init__(message)
        self.best_count = best_count


class ConfigError(IncGmmError):
    exit_code = 4
    kind = "config_error"
