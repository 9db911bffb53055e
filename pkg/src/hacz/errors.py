"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES), so callers
can tell apart malformed files, invalid data, coder desync, and verification
failures without parsing messages.
"""


class HaczError(Exception):
    """Base class for all package errors."""


class FormatError(HaczError):
    """Bad magic bytes, unsupported version, or malformed header."""


class SceneValidationError(HaczError):
    """Scene data violates an invariant (non-finite values, bad ranges)."""


class TruncatedFileError(HaczError):
    """File ended before the declared payload was complete."""


class SectionOverrunError(HaczError):
    """A container section points outside the file or overlaps another."""


class CoderError(HaczError):
    """Entropy coder misuse (symbol outside table, bad model)."""


class CdfDesyncError(HaczError):
    """Decoder state inconsistent with the probability tables."""


class SymbolRangeError(HaczError):
    """A quantized value fell outside the global symbol bounds."""


class DivergenceError(HaczError):
    """Training produced a non-finite loss."""
