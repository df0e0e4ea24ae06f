"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A numeric parameter is outside its valid range."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class ConfigError(ValueError):
    """A scenario configuration is malformed or inconsistent."""


class NumericError(ArithmeticError):
    """A non-finite value appeared mid-computation; carries the node name."""

    def __init__(self, node: str, message: str = ""):
        self.node = node
        super().__init__(message or f"non-finite value produced by node '{node}'")


class TrainingDivergence(ArithmeticError):
    """Training loss became non-finite."""


class SamplerDivergence(ArithmeticError):
    """Sampler state became non-finite; carries the offending step index."""

    def __init__(self, step: int, t: int):
        self.step = step
        self.t = t
        super().__init__(f"sampler state non-finite at step {step} (t={t})")
