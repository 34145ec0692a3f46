"""Exception hierarchy. Each error carries the CLI exit code it maps to."""

from typing import Optional, Sequence


class AimMergeError(Exception):
    exit_code = 1


class InputError(AimMergeError):
    """Missing or malformed user input, or a parameter outside its range."""

    exit_code = 2


class ValidationError(AimMergeError):
    """Inputs that parse but are inconsistent with each other or with a file format."""

    exit_code = 3


class ShapeMismatchError(ValidationError):
    def __init__(self, left: Sequence[int], right: Sequence[int], context: Optional[str] = None):
        self.left = tuple(left)
        self.right = tuple(right)
        where = f" for '{context}'" if context else ""
        super().__init__(f"shape mismatch{where}: {list(self.left)} vs {list(self.right)}")


class CompatibilityError(ValidationError):
    def __init__(self, report, label: str = "checkpoints"):
        self.report = report
        super().__init__(f"{label} are not merge-compatible: {report.summary()}")


class CheckpointFormatError(ValidationError):
    pass


class BadMagicError(CheckpointFormatError):
    def __init__(self, found: bytes):
        self.found = found
        super().__init__(f"bad magic: {found!r}")


class TruncatedPayloadError(CheckpointFormatError):
    pass


class HeaderLengthMismatchError(CheckpointFormatError):
    pass


class NonFiniteValueError(CheckpointFormatError):
    pass


class LayoutError(CheckpointFormatError):
    pass


class ModelSpecError(ValidationError):
    pass


class ProfileError(ValidationError):
    pass


class RelaxationError(InputError):
    pass


class ScoreTableError(InputError):
    pass
