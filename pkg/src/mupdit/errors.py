"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, hyperparameter, or plan."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced, or would produce, a non-finite value."""


class UsageError(RuntimeError):
    """API misuse, e.g. running backward twice over one tape."""


class ProgramError(RuntimeError):
    """Malformed tensor program (undefined names, bad operands)."""


class SelectionError(RuntimeError):
    """No surviving (non-diverged) trial to select from."""
