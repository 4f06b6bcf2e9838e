"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    """Tensor or parameter shapes are inconsistent."""


class ArchitectureError(ValueError):
    """A layer stack cannot be chained into a valid model."""


class CapabilityError(RuntimeError):
    """The model lacks the layer or state required by the request."""


class TrainingError(RuntimeError):
    """Training produced an invalid (non-finite) state."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class ProtocolError(RuntimeError):
    """An evaluation-protocol constraint was violated."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, corrupt or incompatible."""


class DataError(ValueError):
    """A dataset file or dataset description is invalid."""
