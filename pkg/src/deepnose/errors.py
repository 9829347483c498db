"""Exception hierarchy shared across the pipeline."""


class DeepNoseError(Exception):
    """Base class for all pipeline errors."""


class MalformedRecord(DeepNoseError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MalformedRow(DeepNoseError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class HttpFailure(DeepNoseError):
    pass


class NoRecord(DeepNoseError):
    pass


class NotUnit(DeepNoseError):
    pass


class IndexOutOfRange(DeepNoseError):
    pass


class EmptyMolecule(DeepNoseError):
    pass


class GridMismatch(DeepNoseError):
    pass


class ShapeMismatch(DeepNoseError):
    pass


class InvalidConfig(DeepNoseError):
    pass


class IoFailure(DeepNoseError):
    pass


class BadMagic(DeepNoseError):
    pass


class VersionMismatch(DeepNoseError):
    pass


class ConfigMismatch(DeepNoseError):
    pass


class DataMissing(DeepNoseError):
    pass


class DegenerateVariance(DeepNoseError):
    pass


class DegenerateConfiguration(DeepNoseError):
    pass


class ConvergenceFailure(DeepNoseError):
    def __init__(self, message, residuals=None):
        self.residuals = residuals
        super().__init__(message)
