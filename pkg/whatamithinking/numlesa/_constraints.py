from typing import Literal, ClassVar
import operator

from ._struct import struct

__all__ = [
    "T_ValueComparator",
    "T_LengthComparator",
    "BaseConstraint",
    "Value",
    "Length",
]


T_ValueComparator = Literal["eq", "gt", "ge", "le", "lt"]
T_LengthComparator = Literal["eq", "gt", "ge", "le", "lt"]

_comparators = {
    "eq": operator.eq,
    "gt": operator.gt,
    "ge": operator.ge,
    "le": operator.le,
    "lt": operator.lt,
}


class BaseConstraint:
    constraint_type: ClassVar[str]


# NOTE: constraints are frozen so they hash and can be used inside Annotated metadata,
# which typing caches by equality


@struct(frozen=True, kw_only=False)
class Value(BaseConstraint):
    comparator: T_ValueComparator
    value: int | float
    constraint_type: ClassVar[str] = "value"

    def _post_init_(self) -> None:
        if self.comparator not in _comparators:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        if not isinstance(self.value, (int, float)):
            raise TypeError(
                f"Value constraint value must be int/float, not {self.value.__class__.__name__}"
            )

    def check(self, value) -> bool:
        return _comparators[self.comparator](value, self.value)


@struct(frozen=True, kw_only=False)
class Length(BaseConstraint):
    comparator: T_LengthComparator
    value: int
    constraint_type: ClassVar[str] = "length"

    def _post_init_(self) -> None:
        if not isinstance(self.value, int):
            raise TypeError(
                f"Length constraint value must be int, not {self.value.__class__.__name__}"
            )
        if self.value < 0:
            raise ValueError(
                f"Length constraint value must be greater than or equal to zero, not {self.value}"
            )

    def check(self, value) -> bool:
        return _comparators[self.comparator](len(value), self.value)
