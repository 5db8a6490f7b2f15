"""Exception hierarchy shared across the pipeline."""


class SurgvlaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SurgvlaError):
    """A component was wired with incompatible shapes or settings."""


class InvalidInputError(SurgvlaError):
    """Input violates an operation's precondition."""


class DegenerateInputError(InvalidInputError):
    """Input is numerically degenerate (e.g. a zero-norm embedding row)."""


class ContractViolationError(SurgvlaError):
    """Caller passed data that breaks a documented contract (e.g. unnormalized embeddings)."""


class InsufficientDataError(SurgvlaError):
    """Not enough samples to satisfy the request."""


class AlignmentError(SurgvlaError):
    """Answer text could not be located in the rendered conversation."""


class ParseError(SurgvlaError):
    """Backend output did not match the response grammar."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class BackendError(SurgvlaError):
    """LLM backend failed after exhausting retries."""


class JudgeProtocolError(SurgvlaError):
    """Judge reply could not be parsed after retries."""


class IngestError(SurgvlaError):
    """Dataset directory is malformed or an annotation is inconsistent."""


class CheckpointError(SurgvlaError):
    """Checkpoint manifest or blobs fail validation."""


class NoSupervisionError(SurgvlaError):
    """Loss requested on an example whose mask selects no tokens."""


class InvalidComparisonError(SurgvlaError):
    """Ablation arms differ in more than the batch modality mix."""
