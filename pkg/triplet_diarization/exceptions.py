class DiarizationException(Exception):
    """Base exception of the package"""
    exit_code = 2


class ConfigException(DiarizationException, ValueError):
    """Exception to raise when the configuration or command usage is invalid"""
    exit_code = 1


class DataException(DiarizationException, ValueError):
    """Exception to raise when input data (manifest, audio, files) is unusable"""
    exit_code = 2


class NumericException(DiarizationException, ArithmeticError):
    """Exception to raise when training produced a non-finite value"""
    exit_code = 3


class ShapeMismatchException(DataException):
    """Exception to raise when tensor or feature extents do not line up"""
    pass


class SegmentTooShortException(DataException):
    """Exception to raise when there are fewer samples than one analysis window"""
    pass


class InsufficientSpeakersException(DataException):
    """Exception to raise when a dataset cannot fill a speaker-balanced batch"""
    pass


class ManifestValidationException(DataException):
    """Exception to raise when a manifest line fails parsing or schema validation"""
    pass


class ChecksumException(DataException):
    """Exception to raise when a checkpoint or binary container is corrupt"""
    pass


class EmptyTimelineException(DataException):
    """Exception to raise when nothing is left to score after collar and overlap removal"""
    pass
