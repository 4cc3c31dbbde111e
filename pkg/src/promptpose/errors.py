"""Exception types raised across the pipeline.

Every error is a ``ValueError`` subclass so callers that only care about
"bad input" can catch one thing; the CLI maps the more specific classes to
exit codes.
"""


class PromptPoseError(ValueError):
    """Base class for all structured pipeline errors."""

    stage = "input"


class ValidationError(PromptPoseError):
    pass


class PlyFormatError(PromptPoseError):
    def __init__(self, message, offset=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class EmbeddingFormatError(PromptPoseError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class NoObjectFoundError(PromptPoseError):
    """No cluster survived thresholding and clustering."""

    stage = "segmentation"
    code = "no_object_found"


class RegistrationError(PromptPoseError):
    stage = "registration"

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class DegenerateGeometryError(RegistrationError):
    pass


class EmptyGraphError(RegistrationError):
    pass


class CliqueTooSmallError(RegistrationError):
    pass
