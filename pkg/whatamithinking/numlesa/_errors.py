from typing import TYPE_CHECKING, Any, ClassVar
from itertools import groupby

if TYPE_CHECKING:
    from ._issues import BaseIssue
from ._struct import get_names


__all__ = [
    "Error",
    "UsageError",
    "ValidationError",
    "ConfigError",
    "DataError",
    "CorpusParseError",
    "StratificationError",
    "LabelError",
    "DivergenceError",
    "ShapeError",
    "NonScalarError",
    "DomainError",
    "VocabError",
    "ProbeError",
    "CheckpointError",
]


class Error(Exception):
    """Base error for numlesa package"""

    exit_code: ClassVar[int] = 1


class UsageError(Error):
    """Raised when a command is invoked with missing or contradictory flags"""

    exit_code: ClassVar[int] = 2


class ValidationError(Error):
    issues: list["BaseIssue"]
    exit_code: ClassVar[int] = 4

    def __init__(self, issues: list["BaseIssue"], message: str | None = None) -> None:
        self.issues = issues
        super().__init__(message or "One or more validation checks failed for the given data")

    def __str__(self) -> str:
        # group by pointer first, then issue type, so the fields at fault read top-down
        issues = sorted(self.issues, key=lambda _: (_.pointer, _.issue_type))
        parts = []
        for pointer, pissues in groupby(issues, key=lambda _: _.pointer):
            pointer_issues = "\n\n        ".join(
                "\n        ".join(
                    [f"issue_type={pissue.issue_type!r}"]
                    + [
                        f"    {name}={getattr(pissue, name)!r}"
                        for name in sorted(get_names(pissue))
                        if name != "pointer"
                    ]
                )
                for pissue in pissues
            )
            parts.append(f"pointer='{pointer}'\n        {pointer_issues}")
        issue_str = "\n\n    ".join(parts)
        return f"{self.args[0]}\n    {issue_str}"


class ConfigError(ValidationError):
    """Raised when a configuration file or override violates the schema"""

    exit_code: ClassVar[int] = 3

    def __init__(self, issues: list["BaseIssue"], message: str | None = None) -> None:
        super().__init__(issues, message or "Configuration failed validation")


class DataError(Error):
    """Raised when corpus or label data is unusable"""

    exit_code: ClassVar[int] = 4


class CorpusParseError(DataError):
    line: int

    def __init__(self, message: str, line: int) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


class StratificationError(DataError): ...


class LabelError(DataError): ...


class DivergenceError(Error):
    """Raised when a training loss stops being finite"""

    exit_code: ClassVar[int] = 5
    breakdown: Any

    def __init__(self, message: str, breakdown: Any = None) -> None:
        self.breakdown = breakdown
        super().__init__(message if breakdown is None else f"{message}; last losses: {breakdown!r}")


class ShapeError(Error):
    left: tuple[int, ...]
    right: tuple[int, ...]

    def __init__(self, op: str, left: tuple[int, ...], right: tuple[int, ...]) -> None:
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{op}: incompatible shapes {self.left} and {self.right}")


class NonScalarError(Error): ...


class DomainError(Error): ...


class VocabError(Error): ...


class ProbeError(Error): ...


class CheckpointError(DataError): ...
