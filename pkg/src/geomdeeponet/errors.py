"""Exception hierarchy shared across the package."""


class GeomDeepONetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GeomDeepONetError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(GeomDeepONetError, ValueError):
    """An API was called in a state or with arguments it does not support."""


class ConfigError(GeomDeepONetError, ValueError):
    pass


class GeometryError(GeomDeepONetError):
    """Degenerate geometry (e.g. rejection sampling cannot find interior points)."""


class NumericalError(GeomDeepONetError, ArithmeticError):
    pass


class MeshValidationError(GeomDeepONetError, ValueError):
    pass


class ParseError(GeomDeepONetError, ValueError):
    pass


class FittingError(GeomDeepONetError, ValueError):
    pass


class LoadError(GeomDeepONetError, ValueError):
    pass


class TrainingError(GeomDeepONetError, RuntimeError):
    pass


class ResumeError(GeomDeepONetError, ValueError):
    pass


class RegressionError(GeomDeepONetError, ValueError):
    pass
