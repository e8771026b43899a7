"""Exception hierarchy.

``ConfigError`` subclasses signal invalid inputs or option combinations and map
to CLI exit code 2; ``NumericError`` subclasses signal numerical breakdown and
map to exit code 3.
"""


class LaplaceKitError(Exception):
    pass


class ConfigError(LaplaceKitError, ValueError):
    pass


class NumericError(LaplaceKitError, ArithmeticError):
    pass


class InvalidMatrix(ConfigError):
    pass


class InvalidInput(ConfigError):
    pass


class InvalidPrior(ConfigError):
    pass


class InvalidRank(ConfigError):
    pass


class InvalidSize(ConfigError):
    pass


class InvalidVariance(ConfigError):
    pass


class InvalidDistribution(ConfigError):
    pass


class InvalidState(ConfigError):
    pass


class UnsupportedCombination(ConfigError):
    pass


class UnsupportedMode(ConfigError):
    pass


class MissingData(ConfigError):
    pass


class TooLarge(ConfigError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


class BridgeDegenerate(NumericError):
    pass
