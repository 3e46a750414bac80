"""Exception types raised across the package."""


class RangeSegError(Exception):
    """Base class for all package errors."""


class DataError(RangeSegError):
    """Bad input data (files, labels, scans). CLI exit code 2."""


class MalformedScanError(DataError):
    pass


class CorruptValueError(DataError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite value at point {index}")


class UnknownClassError(DataError):
    def __init__(self, raw_id):
        self.raw_id = raw_id
        super().__init__(f"raw semantic id {raw_id} is not in the class map")


class LabelError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class InvalidSpecError(DataError):
    pass


class UndefinedDirectionError(RangeSegError):
    pass


class DegenerateChannelError(RangeSegError):
    pass


class ShapeError(RangeSegError):
    pass


class DetachedTensorError(RangeSegError):
    pass


class NotReadyError(RangeSegError):
    pass


class ConfigError(RangeSegError):
    pass


class CheckpointError(RangeSegError):
    pass


class NumericError(RangeSegError):
    """Non-finite loss during training. CLI exit code 3."""
