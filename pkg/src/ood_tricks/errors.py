"""Exception hierarchy shared by every module of the package."""


class OodTricksError(Exception):
    """Base class for all package errors."""


class ConfigError(OodTricksError, ValueError):
    """Invalid generation, training, policy or experiment parameters."""


class SplitError(ConfigError):
    """Overlapping or unknown domain ids passed to a domain split."""


class PolicyError(ConfigError):
    """An augmentation policy cannot be applied to the given batch."""


class DatasetFormatError(OodTricksError):
    """A stored dataset, checkpoint or logits file is unreadable."""


class ManifestError(DatasetFormatError):
    pass


class PayloadSizeError(DatasetFormatError):
    pass


class FormatVersionError(DatasetFormatError):
    pass


class NumericError(OodTricksError, ArithmeticError):
    """Non-finite values met during training or evaluation.

    ``epoch`` and ``batch`` locate the failure when raised by the trainer.
    """

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
