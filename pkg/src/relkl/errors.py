"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Inputs have inconsistent or empty shapes."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class InputError(ValueError):
    """Malformed user input (token ids, stage specs, tensor files)."""


class DegenerateRowError(ValueError):
    """A valid query row has no visible key position."""

    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"query row {row} has no visible key position")


class TrainingDivergenceError(RuntimeError):
    """A non-finite gradient appeared during distillation."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite gradient at step {step}")
