"""Exception types shared across the package."""


class StateError(RuntimeError):
    """Raised when an operation is called in a state that forbids it.

    Typical causes: stepping an optimizer without gradients, running a
    later training stage with the complete-shape auto-encoder unfrozen,
    or evaluating outputs whose resolution does not match the ground truth.
    """


class PointCloudParseError(ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")
