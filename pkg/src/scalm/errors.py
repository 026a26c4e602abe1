"""Exception hierarchy shared by every scalm module."""

from __future__ import annotations


class ScalmError(Exception):
    """Base class for all errors raised by scalm."""


# taxonomy
class ParseError(ScalmError, ValueError):
    pass


class UnknownSwcId(ScalmError, KeyError):
    def __init__(self, number: int):
        super().__init__(number)
        self.number = number

    def __str__(self) -> str:
        return f"SWC-{self.number} is not in the registry"


# chunker
class LexError(ScalmError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnbalancedBraces(ScalmError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# embedding / vector store
class EmptyInput(ScalmError, ValueError):
    pass


class DimensionMismatch(ScalmError, ValueError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"expected dimension {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ZeroNorm(ScalmError, ValueError):
    pass


class NotNormalized(ScalmError, ValueError):
    pass


class RemoteError(ScalmError):
    def __init__(self, status: int | None, body: str):
        detail = f"HTTP {status}" if status is not None else "transport error"
        super().__init__(f"{detail}: {body[:200]}")
        self.status = status
        self.body = body[:200]


class BatchError(ScalmError):
    """An element of a batch failed; ``index`` is its position."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"batch element {index}: {cause}")
        self.index = index
        self.cause = cause


class FormatError(ScalmError):
    pass


class StoreFrozen(ScalmError):
    pass


# knowledge base
class NotFound(ScalmError, KeyError):
    def __str__(self) -> str:
        return f"no knowledge-base entry {self.args[0]!r}"


class ManifestError(ScalmError):
    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class KbMismatch(ScalmError):
    pass


# llm gateway
class FixtureMiss(ScalmError):
    def __init__(self, digest: str, summary: str):
        super().__init__(f"no recorded response for {digest} ({summary})")
        self.digest = digest
        self.summary = summary


class DigestConflict(ScalmError):
    def __init__(self, digest: str):
        super().__init__(f"fixture {digest} already recorded with different content")
        self.digest = digest


# evaluation
class MissingPrediction(ScalmError, KeyError):
    def __init__(self, path: str):
        super().__init__(path)
        self.path = path

    def __str__(self) -> str:
        return f"no prediction for {self.path}"


class EmptyMatrix(ScalmError, ValueError):
    pass
