"""Exception hierarchy. CLI exit codes are attached to the base classes."""


class CFRGError(Exception):
    exit_code = 1


class ConfigError(CFRGError, ValueError):
    exit_code = 2


class DataError(CFRGError):
    exit_code = 3


class MissingMaskError(DataError):
    pass


class MalformedTreeError(DataError):
    pass


class PairingError(CFRGError, ValueError):
    """Recovery target pyramid does not come from the same samples as the input."""


class NumericError(CFRGError, FloatingPointError):
    exit_code = 4


class UndefinedMetricError(CFRGError, ValueError):
    pass


class WeightsUnavailableError(CFRGError, FileNotFoundError):
    exit_code = 2
