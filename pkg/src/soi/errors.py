"""Exception types shared across the pipeline."""


class PipelineError(RuntimeError):
    """A processing stage produced unusable output.

    Carries the name of the stage that failed so CLI callers can report it.
    """

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class InfeasiblePlanError(RuntimeError):
    """No feasible action sample was found within the sampling budget."""

    def __init__(self, constraint: str, message: str):
        self.constraint = constraint
        super().__init__(f"infeasible ({constraint}): {message}")


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(message)
