"""Exception hierarchy shared by every subpackage."""


class VLPromptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VLPromptError, ValueError):
    pass


class NumericError(VLPromptError, ArithmeticError):
    pass


class EmptyLossError(VLPromptError, ValueError):
    pass


class TapeError(VLPromptError, RuntimeError):
    """Raised when a tape is reused after backward or misused."""


class DeterminismError(VLPromptError, RuntimeError):
    pass


class LengthError(VLPromptError, ValueError):
    pass


class ScaleError(VLPromptError, ValueError):
    pass


class ProtocolError(VLPromptError, RuntimeError):
    pass


class SplitError(VLPromptError, ValueError):
    pass


class InputError(VLPromptError, ValueError):
    pass


class VocabError(VLPromptError, KeyError):
    pass


class FrozenError(VLPromptError, RuntimeError):
    """Raised when a frozen model is mutated or an unfrozen one is used for scoring."""


class OODPurityError(VLPromptError, ValueError):
    """A distribution-shifted sample reached pretraining or a support set."""


class FormatError(VLPromptError, ValueError):
    pass


class CorruptionError(VLPromptError, ValueError):
    pass


class ConfigError(VLPromptError, ValueError):
    pass


class DivergenceError(VLPromptError, FloatingPointError):
    def __init__(self, epoch, lr, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch} (lr={lr})")
        self.epoch = epoch
        self.lr = lr
        self.loss = loss


class PlotError(VLPromptError, ValueError):
    pass
