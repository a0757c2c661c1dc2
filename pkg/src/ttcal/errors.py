"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


class DegenerateBatch(DegenerateInput):
    """A training graph lacks positive or negative pairs."""


class UnreachableTarget(ValueError):
    """No grid threshold attains the requested TPR/TNR.

    ``best`` holds the closest attainable metric value on the grid.
    """

    def __init__(self, message: str, best: float):
        super().__init__(message)
        self.best = best


class NumericOverflow(FloatingPointError):
    def __init__(self, message: str, layer: str):
        super().__init__(f"{message} (layer: {layer})")
        self.layer = layer


class CalibrationFailure(RuntimeError):
    pass


class TrainingFailure(RuntimeError):
    pass
