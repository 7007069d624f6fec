from typing import (
    TypeVar,
    dataclass_transform,
    Callable,
    Protocol,
    ClassVar,
    Any,
    TypeIs,
    get_type_hints,
)
from types import MappingProxyType
import dataclasses

from lru import LRU

__all__ = [
    "StructProto",
    "struct",
    "field",
    "is_struct_class",
    "is_struct_instance",
    "get_fields",
    "get_names",
    "get_type_hints_for",
    "replace",
    "unwrap_annotated",
]

T = TypeVar("T")
_POST_INIT = "_post_init_"

field = dataclasses.field
replace = dataclasses.replace


class StructProto(Protocol):
    """Represents the structure of a struct for use in type hints.

    Structs are dataclasses underneath; rely on the functions in this module
    rather than on the dataclass internals.
    """

    __dataclass_fields__: ClassVar[dict[str, dataclasses.Field]]


def __post_init__(self) -> None:
    # structs name their hook _post_init_ so subclasses do not need super() chains
    hook = getattr(self, _POST_INIT, None)
    if hook is not None:
        hook()


_is_struct_class_cache = LRU(2048)


def is_struct_class(cls) -> TypeIs[type[StructProto]]:
    try:
        return _is_struct_class_cache[cls]
    except (KeyError, TypeError):
        result = isinstance(cls, type) and dataclasses.is_dataclass(cls)
        try:
            _is_struct_class_cache[cls] = result
        except TypeError:
            pass
        return result


def is_struct_instance(obj) -> TypeIs[StructProto]:
    return is_struct_class(obj.__class__)


def get_fields(obj: type[StructProto] | StructProto) -> MappingProxyType[str, dataclasses.Field]:
    """Return a mapping of field name and Field object for init fields."""
    return MappingProxyType(
        {f.name: f for f in dataclasses.fields(obj) if f.init}
    )


def get_names(obj: type[StructProto] | StructProto) -> tuple[str, ...]:
    return tuple(get_fields(obj).keys())


_type_hints_cache = LRU(1024)


def get_type_hints_for(cls: type[StructProto]) -> dict[str, Any]:
    """Resolved field annotations with their Annotated metadata kept."""
    try:
        return _type_hints_cache[cls]
    except KeyError:
        _type_hints_cache[cls] = hints = get_type_hints(cls, include_extras=True)
        return hints


@dataclass_transform(
    eq_default=True,
    order_default=False,
    kw_only_default=True,
    frozen_default=False,
    field_specifiers=(dataclasses.field,),
)
def struct(
    cls: type[T] | None = None,
    /,
    *,
    eq: bool = True,
    order: bool = False,
    frozen: bool = False,
    kw_only: bool = True,
    slots: bool = False,
) -> type[T] | Callable[[type[T]], type[T]]:
    def wrap_struct(cls):
        if _POST_INIT in cls.__dict__ and "__post_init__" not in cls.__dict__:
            cls.__post_init__ = __post_init__
        return dataclasses.dataclass(
            cls,
            eq=eq,
            order=order,
            frozen=frozen,
            kw_only=kw_only,
            slots=slots,
        )

    if cls:
        return wrap_struct(cls)
    return wrap_struct


def unwrap_annotated(type_hint) -> tuple[Any, tuple]:
    """Split ``Annotated[T, *meta]`` into ``(T, meta)``."""
    if getattr(type_hint, "__metadata__", None) is not None and hasattr(type_hint, "__origin__"):
        return type_hint.__origin__, type_hint.__metadata__
    return type_hint, ()
