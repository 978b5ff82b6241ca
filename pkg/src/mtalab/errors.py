"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class MTAError(Exception):
    category = "error"


class ConfigError(MTAError, ValueError):
    category = "config"


class ShapeError(MTAError, ValueError):
    category = "shape"


class NumericError(MTAError, ArithmeticError):
    category = "numeric"


class InputError(MTAError, ValueError):
    category = "input"


class GenerationError(MTAError, RuntimeError):
    category = "generation"


class CheckpointError(MTAError, IOError):
    category = "checkpoint"


class GradCheckError(MTAError, RuntimeError):
    category = "gradcheck"


class ParamCountMismatch(MTAError, AssertionError):
    category = "param-count"
