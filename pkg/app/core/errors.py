"""
Exception hierarchy shared by every stage of the pipeline.

The CLI maps each family to its own exit code (see ``EXIT_CODES``), so a
failing run tells the caller *what kind* of thing went wrong.
"""

from __future__ import annotations

from typing import Optional


class SceneCompressionError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SceneCompressionError, ValueError):
    """Invalid parameter outside a pydantic model (ratios, counts, widths)."""


class ContractError(SceneCompressionError):
    """A caller broke a precondition: shape mismatch, stale tape, bad index."""


class NumericError(SceneCompressionError, ArithmeticError):
    """Non-finite value during training or an optimizer update."""

    def __init__(self, message: str, iteration: Optional[int] = None, loss: Optional[float] = None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.loss = loss


# ── I/O ───────────────────────────────────────────────────────────

class DatasetIOError(SceneCompressionError, OSError):
    """Missing, unreadable or unwritable dataset artifact."""

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        super().__init__(message)
        self.path = path


class ImageDecodeError(DatasetIOError):
    """Raster file could not be decoded (truncated, wrong format, wrong size)."""


class ManifestError(DatasetIOError):
    """Dataset manifest is malformed or inconsistent with files on disk."""


# ── Codec ─────────────────────────────────────────────────────────

class CodecError(SceneCompressionError):
    """Model file could not be written or read."""


class SparsityViolationError(CodecError):
    """Masked positions hold nonzero values; the model is refused."""


class DecodeError(CodecError):
    """Model file is corrupt. ``layer`` / ``offset`` locate the fault."""

    def __init__(self, message: str, layer: Optional[int] = None, offset: Optional[int] = None) -> None:
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.layer = layer
        self.offset = offset


class BadMagicError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    pass


class ChecksumMismatchError(DecodeError):
    pass


class PopcountMismatchError(DecodeError):
    pass


class TruncatedFileError(DecodeError):
    pass


# ── CLI exit codes ────────────────────────────────────────────────

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2

EXIT_CODES = (
    # most specific first
    (ConfigurationError, 3),
    (DatasetIOError, 4),
    (CodecError, 5),
    (NumericError, 6),
    (ContractError, 7),
)


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_UNEXPECTED
