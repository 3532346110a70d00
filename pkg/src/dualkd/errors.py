"""Exception types shared across the package."""


class DualKDError(Exception):
    pass


class ConfigError(DualKDError, ValueError):
    pass


class InputError(DualKDError, ValueError):
    pass


class ShapeError(DualKDError, ValueError):
    pass


class NumericError(DualKDError, ArithmeticError):
    pass


class StateError(DualKDError, RuntimeError):
    pass


class FormatError(DualKDError, ValueError):
    pass


class IncompatibleError(DualKDError, ValueError):
    """Checkpoints that cannot be combined (names or shapes differ)."""


class DivergenceError(DualKDError, RuntimeError):
    pass
