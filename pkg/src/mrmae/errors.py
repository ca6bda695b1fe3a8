"""Exception hierarchy shared by every module."""


class MRMAEError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit code."""


class ConfigError(MRMAEError, ValueError):
    pass


class DataError(MRMAEError, ValueError):
    pass


class PolicyError(MRMAEError, ValueError):
    pass


class TrainingError(MRMAEError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class FitError(MRMAEError, RuntimeError):
    pass
