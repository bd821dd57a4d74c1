"""Exception types shared across the package."""


class SplitwingError(Exception):
    pass


class DimensionError(SplitwingError, ValueError):
    pass


class NumericError(SplitwingError, ArithmeticError):
    pass


class ValidationError(SplitwingError, ValueError):
    pass


class FormatError(SplitwingError, ValueError):
    """Raised when image bytes cannot be decoded."""


class ModeError(SplitwingError, RuntimeError):
    """Operation not allowed in the model's current mode (e.g. frozen client)."""


class ProtocolError(SplitwingError):
    pass


class BadMagicError(ProtocolError):
    pass


class BadVersionError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class LengthMismatchError(ProtocolError):
    pass


class PayloadError(ProtocolError):
    """Frame is well formed but its payload does not parse for its message type."""


class DuplicateFrameError(ProtocolError):
    pass


class RoundAbortError(ProtocolError):
    def __init__(self, round_id, missing):
        self.round_id = round_id
        self.missing = sorted(missing)
        names = ", ".join(f"client {c}" for c in self.missing)
        super().__init__(f"round {round_id} aborted: no feature map from {names}")
