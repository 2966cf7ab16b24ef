"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a config file or config value is malformed or inconsistent."""


class LayoutError(ConfigError):
    """Raised when scale/patch/token geometry cannot be realized.

    Examples: a resolution not divisible by its patch size, tap layers out of
    range or non-increasing, head_dim incompatible with the rotary embedding.
    """


class ContractError(RuntimeError):
    """Raised when runtime inputs violate a documented interface contract.

    Shape/dtype mismatches, labels out of range, pyramids whose per-scale
    shapes disagree with the configured scale list, and similar caller errors.
    """


class NumericFault(ArithmeticError):
    """Raised when a computation produces non-finite values.

    Carries an optional ``layer`` attribute identifying the first transformer
    block (or named stage) where the non-finite value appeared.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer
