from typing import ClassVar, Any
from collections.abc import Mapping, Sequence
from types import NoneType

from ._struct import struct, field
from ._constraints import T_ValueComparator, T_LengthComparator
from ._pointers import Pointer

__all__ = [
    "BaseIssue",
    "SerializeIssue",
    "DeserializeIssue",
    "JsonTypeIssue",
    "NumberIssue",
    "LengthIssue",
    "ExtraFieldIssue",
    "MissingFieldIssue",
    "EnumOptionIssue",
    "SumIssue",
    "OrderIssue",
    "FiniteIssue",
    "InvariantIssue",
]


def json_type_name(value: Any) -> str:
    match value:
        case NoneType():
            return "null"
        case bool():
            return "boolean"
        case int():
            return "integer"
        case float():
            return "number"
        case str():
            return "string"
        case Mapping():
            return "object"
        case Sequence():
            return "array"
        case _:
            return value.__class__.__name__


@struct
class BaseIssue:
    issue_type: ClassVar[str]
    value: Any
    pointer: Pointer


@struct
class SerializeIssue(BaseIssue):
    issue_type: ClassVar[str] = "serialize"
    message: str


@struct
class DeserializeIssue(BaseIssue):
    issue_type: ClassVar[str] = "deserialize"
    message: str


@struct
class JsonTypeIssue(BaseIssue):
    issue_type: ClassVar[str] = "json_type"
    expected_type: str
    actual_type: str = field(init=False)

    def _post_init_(self) -> None:
        self.actual_type = json_type_name(self.value)


@struct
class NumberIssue(BaseIssue):
    issue_type: ClassVar[str] = "number"
    comparator: T_ValueComparator
    limit: float


@struct
class LengthIssue(BaseIssue):
    issue_type: ClassVar[str] = "length"
    comparator: T_LengthComparator
    limit: int
    length: int = field(init=False)

    def _post_init_(self) -> None:
        self.length = len(self.value)


@struct
class ExtraFieldIssue(BaseIssue):
    issue_type: ClassVar[str] = "extra_field"
    extra: str


@struct
class MissingFieldIssue(BaseIssue):
    issue_type: ClassVar[str] = "missing_field"


@struct
class EnumOptionIssue(BaseIssue):
    issue_type: ClassVar[str] = "enum_option"
    options: tuple


@struct
class SumIssue(BaseIssue):
    issue_type: ClassVar[str] = "sum"
    expected: float
    tolerance: float


@struct
class OrderIssue(BaseIssue):
    issue_type: ClassVar[str] = "order"
    message: str


@struct
class FiniteIssue(BaseIssue):
    issue_type: ClassVar[str] = "finite"


@struct
class InvariantIssue(BaseIssue):
    issue_type: ClassVar[str] = "invariant"
    message: str
