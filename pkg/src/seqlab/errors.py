"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, raised at construction time."""


class ShapeError(ValueError):
    """Array shapes incompatible with the requested operation."""


class DataError(ValueError):
    """Malformed dataset file or record."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint."""


class NonFiniteLossError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries a diagnostic dump so the failure step can be inspected.
    """

    def __init__(self, step: int, lr: float, loss: float, grad_norms: dict):
        self.step = step
        self.lr = lr
        self.loss = loss
        self.grad_norms = grad_norms
        worst = sorted(grad_norms.items(), key=lambda kv: -kv[1])[:5]
        super().__init__(
            f"non-finite loss at step {step}: loss={loss!r}, lr={lr:.3e}, "
            f"largest grad norms: {worst}"
        )
