"""Shared exception types."""


class CheckportError(Exception):
    """Base class for all tool errors."""


class IoError(CheckportError):
    """A source file could not be read."""


class EncodingError(CheckportError):
    """A source file is not valid UTF-8 text."""


class ParseError(CheckportError):
    """Top-level structure of a source unit could not be recognized.

    Carries the offending location so the CLI can point at it.
    """

    def __init__(self, message: str, path: str = "", line: int = 0):
        self.path = path
        self.line = line
        loc = f"{path}:{line}: " if path else ""
        super().__init__(f"{loc}{message}")


class BoundsSyntaxError(CheckportError):
    """Annotation text does not conform to the bounds grammar."""


class DegenerateArray(CheckportError):
    """A zero-length array cannot carry a null-terminated count."""


class BackendUnavailable(CheckportError):
    """The completion backend failed after bounded retries."""


class ReplayMiss(CheckportError):
    """No recorded completions exist for the query fingerprint."""


class PromptTooLarge(CheckportError):
    """Rendered prompt exceeds the configured token budget."""


class MalformedBlock(CheckportError):
    """A patch block was opened but never properly terminated."""


class NoMatch(CheckportError):
    """A patch block's original lines do not occur in the target code."""


class AmbiguousOverlap(CheckportError):
    """Patch blocks matched overlapping regions of the target code."""


class NameCollision(CheckportError):
    """A symbolically inserted declaration clashes with an existing one."""


class GroundTruthMismatch(CheckportError):
    """A ground-truth entry names a declaration absent from the output."""
