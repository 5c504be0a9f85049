"""Exception hierarchy shared by every pipeline stage."""


class RestorationError(Exception):
    """Base class for all package errors."""


class ArgumentError(RestorationError, ValueError):
    pass


class IngestError(RestorationError):
    pass


class DegradeError(RestorationError):
    pass


class PairingError(RestorationError):
    pass


class LabelError(RestorationError):
    pass


class PadError(RestorationError, ValueError):
    pass


class ConfigError(RestorationError, ValueError):
    pass


class TransferError(RestorationError):
    pass


class EnsembleError(RestorationError):
    pass


class EvalError(RestorationError):
    pass


class CheckpointError(RestorationError):
    pass


class NumericsError(RestorationError, FloatingPointError):
    """Raised when a forward pass or loss produces non-finite values.

    Attributes:
        frame (int | None): offending frame index, when known.
        stage (str | None): pass name or training phase.
        last_good (str | None): path of the last checkpoint written before
            the failure.
    """

    def __init__(self, message, frame=None, stage=None, last_good=None):
        super().__init__(message)
        self.frame = frame
        self.stage = stage
        self.last_good = last_good
