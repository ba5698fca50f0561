"""Exception hierarchy shared by all modules."""


class CobraError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(CobraError, ValueError):
    pass


class InvalidParameterError(CobraError, ValueError):
    pass


class InvalidInputError(CobraError, ValueError):
    pass


class PreconditionError(CobraError, ValueError):
    pass


class ConfigurationError(CobraError, ValueError):
    pass


class UnsupportedModeError(CobraError, ValueError):
    pass


class StateError(CobraError, ValueError):
    pass
