"""Exception types shared across the solver."""


class InstanceError(ValueError):
    """Malformed problem data (dimensions, coupling, partition)."""


class EvaluationError(ArithmeticError):
    """An evaluator returned non-finite values."""

    def __init__(self, message, subsystem=None):
        if subsystem is not None:
            message = f"subsystem {subsystem}: {message}"
        super().__init__(message)
        self.subsystem = subsystem


class InteriorViolationError(ValueError):
    """Slack or inequality multiplier left the open positive orthant."""


class FactorizationError(ArithmeticError):
    def __init__(self, message, subsystem=None):
        if subsystem is not None:
            message = f"subsystem {subsystem}: {message}"
        super().__init__(message)
        self.subsystem = subsystem


class CurvatureError(ArithmeticError):
    """Conjugate gradient met a direction with q'Sq <= 0."""


class CaseParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
