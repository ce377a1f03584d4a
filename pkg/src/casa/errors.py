"""Exception hierarchy shared by every casa module."""


class CasaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CasaError, ValueError):
    pass


class LabelError(CasaError, ValueError):
    pass


class EmptyBatchError(CasaError, ValueError):
    pass


class ContractError(CasaError, ValueError):
    pass


class GradientCheckError(CasaError, AssertionError):
    pass


class SpecError(CasaError, ValueError):
    pass


class ParseError(CasaError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(CasaError, ValueError):
    pass


class SplitError(CasaError, ValueError):
    pass


class PolicyError(CasaError, ValueError):
    pass


class ConfigError(CasaError, ValueError):
    pass


class TrainingError(CasaError, RuntimeError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class CheckpointVersionError(CasaError, ValueError):
    pass


class ExperimentError(CasaError, RuntimeError):
    """A pipeline stage failed; carries enough context to locate it."""

    def __init__(self, stage, task, seed, cause):
        super().__init__(f"stage={stage} task={task} seed={seed}: {cause}")
        self.stage = stage
        self.task = task
        self.seed = seed
        self.cause = cause
