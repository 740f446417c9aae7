"""Exception hierarchy shared by every module."""


class TiclabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TiclabError, ValueError):
    """Invalid configuration, shapes or hyperparameters."""


class UsageError(TiclabError, ValueError):
    """A call violated an operation's precondition."""


class IntegrityError(TiclabError):
    """A cache or stored artifact is inconsistent (duplicate, missing, frozen)."""


class NumericError(TiclabError, ArithmeticError):
    """Non-finite values were produced or consumed.

    Attributes:
        step: timestep index where the failure happened, if known.
        layer: attention layer index, if known.
    """

    def __init__(self, message, step=None, layer=None):
        context = []
        if step is not None:
            context.append(f"step={step}")
        if layer is not None:
            context.append(f"layer={layer}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.step = step
        self.layer = layer
