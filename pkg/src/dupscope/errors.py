"""Exception types shared across the package."""


class DupscopeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DupscopeError):
    pass


class NonFiniteResult(DupscopeError):
    pass


class NotScalar(DupscopeError):
    pass


class NonDeterministicFunction(DupscopeError):
    pass


class OddDimension(DupscopeError):
    pass


class InvalidTarget(DupscopeError):
    pass


class InvalidRate(DupscopeError):
    pass


class NonPositiveDelta(DupscopeError):
    pass


class NonPositiveSigma(DupscopeError):
    pass


class NotSquareGrid(DupscopeError):
    pass


class KOutOfRange(DupscopeError):
    pass


class BadImageSize(DupscopeError):
    pass


class EmptyDataset(DupscopeError):
    pass


class DivergedLoss(DupscopeError):
    """Training hit a non-finite loss; carries the last good epoch index."""

    def __init__(self, message, last_good_epoch=None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class IoError(DupscopeError):
    pass


class BadMagic(DupscopeError):
    pass


class VersionMismatch(DupscopeError):
    pass


class ShapeMismatchOnLoad(DupscopeError):
    pass


class PatchDoesNotFit(DupscopeError):
    pass


class CannotSeparate(DupscopeError):
    pass


class BadParameter(DupscopeError):
    pass


class LengthMismatch(DupscopeError):
    pass


class SingleClass(DupscopeError):
    pass


class ConfigError(DupscopeError):
    pass
