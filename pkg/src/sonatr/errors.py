"""Exception hierarchy shared by all modules."""


class SonatrError(Exception):
    """Base class for toolkit errors."""


class DimensionError(SonatrError, ValueError):
    pass


class TrainingDataError(SonatrError, ValueError):
    pass


class CalibrationError(SonatrError, RuntimeError):
    pass


class FormatError(SonatrError, ValueError):
    """Malformed or unsupported file contents."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Weight blocks disagree with the embedded network description."""


class UnsupportedDepthError(FormatError):
    pass
