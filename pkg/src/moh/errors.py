"""Exception hierarchy shared by every module in the package."""


class MoHError(Exception):
    pass


class ShapeError(MoHError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MoHError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(MoHError, ValueError):
    """An architectural or training configuration is invalid."""


class DivergenceError(MoHError, RuntimeError):
    def __init__(self, step: int, detail: str = "loss is not finite"):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class CheckpointError(MoHError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, malformed record, or trailing garbage."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not fit the stored configuration."""
