"""Exception hierarchy shared by the solvers and the command line."""


class ParabolicMCError(Exception):
    exit_code = 1


class ConfigurationError(ParabolicMCError, ValueError):
    exit_code = 2


class UsageError(ParabolicMCError, ValueError):
    exit_code = 2


class UnsupportedVolatilityError(ConfigurationError):
    pass


class NumericalBlowupError(ParabolicMCError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class TrainingError(ParabolicMCError, RuntimeError):
    exit_code = 3

    def __init__(self, message, history=None, breakdown=None):
        super().__init__(message)
        self.history = history
        self.breakdown = breakdown


class HorizonTooShortError(ParabolicMCError, RuntimeError):
    exit_code = 3

    def __init__(self, message, censored_fraction):
        super().__init__(message)
        self.censored_fraction = censored_fraction


class MissingArtifactError(ParabolicMCError, FileNotFoundError):
    exit_code = 4
