"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so the split matters: evaluation/protocol
failures are recoverable per-iteration events, numerical failures abort a run.
"""


class BofusionError(Exception):
    """Base class for package-specific errors."""


class EvaluationFailedError(BofusionError):
    """An evaluation produced no usable value (non-finite, diverged, or refused)."""


class ProtocolError(BofusionError):
    """A black-box evaluator violated the line-JSON protocol (bad id, malformed
    reply, timeout, or dead process)."""


class NumericalError(BofusionError):
    """A numerical routine could not complete (factorization failure,
    empty candidate set, invalid geometry)."""


class CertificateError(NumericalError):
    """Landscape generation exhausted its retry budget without certifying
    loss/metric misalignment."""


class CheckpointError(BofusionError):
    """Base class for checkpoint serialization failures."""


class CheckpointFormatError(CheckpointError):
    """Sidecar header missing, malformed, or carrying an unknown format tag."""


class CheckpointTruncatedError(CheckpointError):
    """Payload file shorter than the header-declared dimension."""


class CheckpointDimError(CheckpointError):
    """Header dimension disagrees with the payload length or the member set."""


class UsageError(BofusionError):
    """Bad command-line arguments or malformed config/input files."""


class PipelineStageError(BofusionError):
    """Wraps an error raised inside one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
