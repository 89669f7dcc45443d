"""Exception hierarchy shared by every hbridge module."""


class HBridgeError(Exception):
    """Base class for all hbridge failures."""


class ConfigError(HBridgeError):
    """A configuration document or record is invalid."""


class UnsupportedConfigError(ConfigError):
    """The configuration is well-formed but the model cannot realize it."""


class InputError(HBridgeError, ValueError):
    """Runtime input (tokens, tensors, patterns) violates a precondition."""


class NumericError(HBridgeError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class UndefinedReferenceError(NumericError):
    """Normalized error requested against an all-zero reference."""


class FrozenTensorUpdateError(HBridgeError, RuntimeError):
    """Internal invariant violation: the optimizer touched a frozen tensor."""


class CheckpointError(HBridgeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, fields: list[str]):
        super().__init__("checkpoint config differs in: " + ", ".join(fields))
        self.fields = fields


class DatasetFormatError(HBridgeError):
    pass
