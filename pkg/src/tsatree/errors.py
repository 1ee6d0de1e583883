"""Exception types shared across the package."""


class TsaTreeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(TsaTreeError, ValueError):
    pass


class NonScalarOutput(TsaTreeError, ValueError):
    pass


class TapeConsumed(TsaTreeError, RuntimeError):
    """Raised when backward is called twice on the same tape."""


class NoConvergence(TsaTreeError, RuntimeError):
    pass


class SingularNetwork(TsaTreeError, RuntimeError):
    pass


class NumericalBlowup(TsaTreeError, RuntimeError):
    pass


class DegenerateDataset(UserWarning):
    """Warning: every generated label is identical."""


class DivisionByZero(TsaTreeError, ZeroDivisionError):
    pass


class IndexOutOfRange(TsaTreeError, IndexError):
    pass


class LengthMismatch(TsaTreeError, ValueError):
    pass


class SurrogateMissing(TsaTreeError, ValueError):
    pass


class EmptyInput(TsaTreeError, ValueError):
    pass


class SchemaMismatch(TsaTreeError, ValueError):
    pass


class WidthMismatch(TsaTreeError, ValueError):
    pass


class EmptyTrainingSet(TsaTreeError, ValueError):
    pass


class SampleNotFound(TsaTreeError, LookupError):
    pass


class StageError(TsaTreeError, RuntimeError):
    """Wraps a failure inside the training loop with its epoch and stage."""

    def __init__(self, epoch, stage, cause):
        super().__init__(f"epoch {epoch}, stage {stage!r}: {cause}")
        self.epoch = epoch
        self.stage = stage
        self.cause = cause
