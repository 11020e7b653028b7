"""Exception types raised across the latent_bridge library."""


class LatentBridgeError(Exception):
    """Base class for every error raised by latent_bridge."""


class DimensionMismatchError(LatentBridgeError, ValueError):
    """A tensor, grid or sequence does not have the shape an operation requires."""


class OutOfRangeError(LatentBridgeError, ValueError):
    """A scalar or index lies outside the domain an operation accepts."""


class ConfigError(LatentBridgeError, ValueError):
    """Invalid configuration values, unknown keys or unknown variant ids."""


class FrozenTensorError(LatentBridgeError, RuntimeError):
    """A tensor flagged frozen was handed to an optimizer or changed during training."""


class DivergenceError(LatentBridgeError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, phase: str, step: int, loss: float, last_finite: float = float("nan")):
        self.phase = phase
        self.step = step
        self.loss = loss
        self.last_finite = last_finite
        super().__init__(
            f"{phase}: loss became {loss} at step {step} (last finite loss {last_finite})"
        )
