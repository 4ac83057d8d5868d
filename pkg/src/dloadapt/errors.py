"""Exception hierarchy shared across the package."""


class DloError(Exception):
    """Base class for every error raised by dloadapt."""

    category = "error"


class SimulationDiverged(DloError):
    """The rod state became non-finite."""

    category = "diverged"

    def __init__(self, particle: int, message: str | None = None):
        self.particle = particle
        super().__init__(message or f"simulation diverged at particle {particle}")


class UnsupportedOperation(DloError):
    category = "unsupported"


class ModelFileError(DloError):
    category = "model-file"


class VersionMismatch(ModelFileError):
    pass


class DimensionMismatch(ModelFileError):
    pass


class CorruptPayload(ModelFileError):
    pass


class DatasetError(DloError):
    """Dataset collection aborted; the samples gathered so far are attached."""

    category = "dataset"

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)


class TrainingDiverged(DloError):
    category = "diverged"

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became NaN at epoch {epoch}")


class RunAborted(DloError):
    """Closed-loop run stopped early; ``diagnostics`` holds everything logged."""

    category = "diverged"

    def __init__(self, message: str, diagnostics=None):
        self.diagnostics = diagnostics if diagnostics is not None else []
        super().__init__(message)


class ErrorDynamicsViolation(RunAborted):
    """Measured approximation error drifted too far from the task-error dynamics."""


class ConfigError(DloError):
    category = "config"
