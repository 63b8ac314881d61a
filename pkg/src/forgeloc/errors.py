"""Exception types shared across the package."""


class ForgelocError(Exception):
    """Base class for all package errors."""


class FileMissing(ForgelocError, FileNotFoundError):
    pass


class DecodeError(ForgelocError, ValueError):
    pass


class ShapeError(ForgelocError, ValueError):
    pass


class ShapeMismatch(ShapeError):
    pass


class InvalidKind(ForgelocError, ValueError):
    pass


class DegenerateRegion(ForgelocError, RuntimeError):
    pass


class SchemaError(ForgelocError, ValueError):
    pass


class NonFiniteLoss(ForgelocError, FloatingPointError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class CodecHashMismatch(ForgelocError, RuntimeError):
    pass


class EmptyInput(ForgelocError, ValueError):
    pass


class InvalidDistribution(ForgelocError, ValueError):
    pass


class DivisibilityError(ForgelocError, ValueError):
    pass


class CodecError(ForgelocError, RuntimeError):
    pass


class TooSmall(ForgelocError, ValueError):
    pass


class UsageError(ForgelocError, ValueError):
    pass
