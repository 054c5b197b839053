"""Exception hierarchy shared across the package.

Validation/configuration problems and runtime/numeric problems are kept in
separate branches so the CLI can map them to distinct exit codes.
"""


class PatchsegError(Exception):
    """Base class for all package errors."""


class ConfigError(PatchsegError):
    """Invalid configuration: bad dimensions, missing layers, wrong groups."""


class DimensionError(ConfigError):
    """Shape mismatch; the message names the offending axis."""


class ValidationError(PatchsegError):
    """Invalid data handed to an operation (non-binary masks, bad labels...)."""


class DegenerateInputError(PatchsegError):
    """Numerically degenerate input: zero-norm vector, zero-energy spectrum."""


class FormatError(PatchsegError):
    """Malformed file payload; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(PatchsegError):
    """Checkpoint/dataset contents disagree with their manifest."""


class GenerationError(PatchsegError):
    """Synthetic scene generation cannot satisfy the requested spec."""


class NumericError(PatchsegError):
    """Non-finite values where finite ones are required (gradients, losses)."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries epoch/step context."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step
