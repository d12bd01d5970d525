"""Error types. Every error carries a machine-readable ``code`` and the CLI exit status it maps to."""


class GenlmkError(Exception):
    code = "E_GENERIC"
    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)
        self.detail = message


class TemplateParseError(GenlmkError):
    code = "E_PARSE"
    exit_code = 3


class LandmarkIndexError(GenlmkError):
    code = "E_INDEX"
    exit_code = 3


class PointRangeError(GenlmkError):
    code = "E_RANGE"
    exit_code = 3


class EmptyTemplateError(GenlmkError):
    code = "E_EMPTY"
    exit_code = 3


class ShapeError(GenlmkError, ValueError):
    code = "E_SHAPE"
    exit_code = 3


class ParamError(GenlmkError, ValueError):
    code = "E_PARAM"
    exit_code = 2


class NonFiniteError(GenlmkError, FloatingPointError):
    code = "E_NONFINITE"
    exit_code = 4


class DataError(GenlmkError):
    code = "E_DATA"
    exit_code = 3


class FrameIOError(GenlmkError, OSError):
    code = "E_IO"
    exit_code = 3


class AlignError(GenlmkError):
    code = "E_ALIGN"
    exit_code = 3


class ShortTrackError(GenlmkError):
    code = "E_SHORT"
    exit_code = 3
