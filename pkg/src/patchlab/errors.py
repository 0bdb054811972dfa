"""Exception hierarchy shared by every patchlab module."""


class PatchLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PatchLabError):
    """Inputs have incompatible or invalid dimensions."""


class DivisibilityError(PatchLabError):
    """A patch grid does not evenly divide the image it is applied to."""


class ContractError(PatchLabError):
    """An operation was called on a value that violates its precondition."""


class GenerationError(PatchLabError):
    """Occluder placement could not reach the requested coverage."""

    def __init__(self, message: str, best_achieved: float):
        super().__init__(message)
        self.best_achieved = best_achieved


class ProtocolError(PatchLabError):
    """A peer sent a malformed or out-of-contract protocol message."""


class VersionError(ProtocolError):
    """The peer speaks an unsupported protocol version."""


class TransportError(PatchLabError):
    """The connection to an external oracle failed; safe to retry.

    ``batch_index`` is the position within the submitted batch at which the
    failure occurred, or None when no request was in flight.
    """

    def __init__(self, message: str, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
