"""Exception and warning types shared across the package."""


class FlowError(Exception):
    """Base class for every error raised by cavflow."""


class OutOfGrid(FlowError, IndexError):
    pass


class ShapeMismatch(FlowError, ValueError):
    pass


class InsufficientHistory(FlowError):
    pass


class SeriesTooShort(FlowError, ValueError):
    pass


class EmptyDataset(FlowError, ValueError):
    pass


class StreamTooShort(FlowError, ValueError):
    pass


class NoLabeledSamples(FlowError, ValueError):
    pass


class FormatError(FlowError):
    """A binary file has the wrong magic, version or header fields."""


class TruncatedFile(FormatError):
    pass


class SaturationWarning(UserWarning):
    """Device counts crossed the 1000-device clamp of the transform."""


class BudgetZeroWarning(UserWarning):
    pass
