"""Exception hierarchy; the CLI maps each class to an exit code."""


class IvpldaError(Exception):
    exit_code = 2


class ConfigError(IvpldaError):
    """Invalid configuration or command-line usage."""

    exit_code = 1


class DataError(IvpldaError, ValueError):
    """Inputs are malformed, mismatched or insufficient."""

    exit_code = 2


class NumericalError(IvpldaError, ArithmeticError):
    """A decomposition failed or an estimate degenerated."""

    exit_code = 3
