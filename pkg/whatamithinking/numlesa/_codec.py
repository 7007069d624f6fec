from typing import Any, Literal, Union, get_origin, get_args, TypeVar
from collections.abc import Mapping, Sequence
from enum import Enum
from types import UnionType, NoneType
import dataclasses
import math

import numpy as np
from lru import LRU

from ._pointers import Pointer
from ._issues import (
    BaseIssue,
    SerializeIssue,
    DeserializeIssue,
    JsonTypeIssue,
    NumberIssue,
    LengthIssue,
    ExtraFieldIssue,
    MissingFieldIssue,
    EnumOptionIssue,
    FiniteIssue,
    InvariantIssue,
)
from ._errors import ValidationError
from ._constraints import BaseConstraint, Value, Length
from ._struct import (
    is_struct_class,
    is_struct_instance,
    get_fields,
    get_type_hints_for,
    unwrap_annotated,
)

__all__ = [
    "serialize",
    "deserialize",
    "structure",
    "unstructure",
    "convert",
    "validate",
    "dumps",
    "loads",
]

T = TypeVar("T")

_origin_cache = LRU(1024)
_args_cache = LRU(1024)


def cached_get_origin(tp) -> Any:
    try:
        return _origin_cache[tp]
    except KeyError:
        _origin_cache[tp] = result = get_origin(tp)
        return result
    except TypeError:  # unhashable hint
        return get_origin(tp)


def cached_get_args(tp) -> tuple:
    try:
        return _args_cache[tp]
    except KeyError:
        _args_cache[tp] = result = get_args(tp)
        return result
    except TypeError:
        return get_args(tp)


def serialize(value: Any) -> bytes:
    import orjson

    try:
        return orjson.dumps(
            value, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
        )
    except (TypeError, orjson.JSONEncodeError) as exc:
        raise ValidationError(
            [SerializeIssue(value=value, pointer=Pointer.root, message=exc.args[0])]
        ) from exc


def deserialize(value: bytes | str) -> Any:
    import orjson

    try:
        return orjson.loads(value)
    except orjson.JSONDecodeError as exc:
        raise ValidationError(
            [DeserializeIssue(value=value, pointer=Pointer.root, message=exc.args[0])]
        ) from exc


def _check_constraints(
    value: Any, constraints: tuple, pointer: Pointer
) -> list[BaseIssue]:
    issues = []
    for constraint in constraints:
        if not isinstance(constraint, BaseConstraint):
            continue
        match constraint:
            case Value():
                if not constraint.check(value):
                    issues.append(
                        NumberIssue(
                            value=value,
                            pointer=pointer,
                            comparator=constraint.comparator,
                            limit=constraint.value,
                        )
                    )
            case Length():
                if not constraint.check(value):
                    issues.append(
                        LengthIssue(
                            value=value,
                            pointer=pointer,
                            comparator=constraint.comparator,
                            limit=constraint.value,
                        )
                    )
    return issues


def _structure_struct(
    data: Any, cls: type, pointer: Pointer
) -> tuple[Any, list[BaseIssue]]:
    if not isinstance(data, Mapping):
        return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="object")]
    issues: list[BaseIssue] = []
    hints = get_type_hints_for(cls)
    fields = get_fields(cls)
    kwargs = {}
    for name, fld in fields.items():
        fpointer = pointer / name
        if name not in data:
            if (
                fld.default is dataclasses.MISSING
                and fld.default_factory is dataclasses.MISSING
            ):
                issues.append(MissingFieldIssue(value=None, pointer=fpointer))
            continue
        value, fissues = structure(data[name], hints[name], fpointer)
        issues.extend(fissues)
        kwargs[name] = value
    for extra in data.keys() - fields.keys():
        issues.append(
            ExtraFieldIssue(value=data[extra], pointer=pointer / str(extra), extra=str(extra))
        )
    if issues:
        return data, issues
    try:
        instance = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        return data, [InvariantIssue(value=data, pointer=pointer, message=str(exc))]
    if (check := getattr(instance, "_validate_", None)) is not None:
        issues.extend(check(pointer))
    return instance, issues


def _structure_sequence(
    data: Any, origin: type, args: tuple, pointer: Pointer
) -> tuple[Any, list[BaseIssue]]:
    if isinstance(data, (str, bytes)) or not isinstance(data, Sequence):
        return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="array")]
    issues: list[BaseIssue] = []
    items = []
    if origin is tuple and args and args[-1] is not Ellipsis:
        if len(args) != len(data):
            return data, [
                LengthIssue(value=data, pointer=pointer, comparator="eq", limit=len(args))
            ]
        hints = args
    else:
        hints = (args[0] if args else Any,) * len(data)
    for i, (item, hint) in enumerate(zip(data, hints)):
        value, iissues = structure(item, hint, pointer / i)
        issues.extend(iissues)
        items.append(value)
    if origin in (frozenset, set):
        return origin(items), issues
    if origin is tuple:
        return tuple(items), issues
    return items, issues


def structure(
    data: Any, type_hint: Any, pointer: Pointer = Pointer.root
) -> tuple[Any, list[BaseIssue]]:
    """Convert plain json-like data into the type described by ``type_hint``.

    Returns the converted value together with every issue found; the value is
    only meaningful when the issue list is empty.
    """
    type_hint, constraints = unwrap_annotated(type_hint)
    origin = cached_get_origin(type_hint)
    args = cached_get_args(type_hint)
    issues: list[BaseIssue]

    if type_hint is Any:
        value, issues = data, []
    elif is_struct_class(type_hint):
        if isinstance(data, type_hint):
            value, issues = data, []
        else:
            value, issues = _structure_struct(data, type_hint, pointer)
    elif origin is Literal:
        if data in args:
            value, issues = data, []
        else:
            value, issues = data, [EnumOptionIssue(value=data, pointer=pointer, options=args)]
    elif isinstance(type_hint, type) and issubclass(type_hint, Enum):
        try:
            value, issues = type_hint(data), []
        except ValueError:
            value = data
            issues = [
                EnumOptionIssue(
                    value=data,
                    pointer=pointer,
                    options=tuple(_.value for _ in type_hint),
                )
            ]
    elif origin in (Union, UnionType):
        if data is None and NoneType in args:
            return None, []
        issues = []
        for option in args:
            if option is NoneType:
                continue
            value, oissues = structure(data, option, pointer)
            if not oissues:
                issues = []
                break
            issues = issues or oissues
        else:
            value = data
    elif origin in (list, tuple, frozenset, set) or type_hint in (list, tuple):
        value, issues = _structure_sequence(data, origin or type_hint, args, pointer)
    elif origin is dict or type_hint is dict:
        if not isinstance(data, Mapping):
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="object")]
        key_hint, value_hint = args or (Any, Any)
        issues = []
        value = {}
        for k, v in data.items():
            kvalue, kissues = structure(k, key_hint, pointer / str(k))
            vvalue, vissues = structure(v, value_hint, pointer / str(k))
            issues.extend(kissues)
            issues.extend(vissues)
            value[kvalue] = vvalue
    elif type_hint is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="number")]
        value = float(data)
        issues = [] if math.isfinite(value) else [FiniteIssue(value=data, pointer=pointer)]
    elif type_hint is int:
        if isinstance(data, bool) or not isinstance(data, int):
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="integer")]
        value, issues = data, []
    elif type_hint is bool:
        if not isinstance(data, bool):
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="boolean")]
        value, issues = data, []
    elif type_hint is str:
        if not isinstance(data, str):
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="string")]
        value, issues = data, []
    elif type_hint is NoneType or type_hint is None:
        if data is not None:
            return data, [JsonTypeIssue(value=data, pointer=pointer, expected_type="null")]
        value, issues = None, []
    else:
        raise TypeError(f"no conversion available for type hint {type_hint!r}")

    if constraints and not issues:
        issues = _check_constraints(value, constraints, pointer)
    return value, issues


def unstructure(value: Any) -> Any:
    """Turn structs, enums, tuples and numpy values into json-ready python data."""
    if is_struct_instance(value):
        return {name: unstructure(getattr(value, name)) for name in get_fields(value)}
    match value:
        case Enum():
            return value.value
        case bool() | int() | float() | str() | None:
            return value
        case np.ndarray():
            return value.tolist()
        case np.generic():
            return value.item()
        case Mapping():
            return {
                (k.value if isinstance(k, Enum) else k): unstructure(v)
                for k, v in value.items()
            }
        case tuple() | list():
            return [unstructure(_) for _ in value]
        case frozenset() | set():
            return sorted(unstructure(_) for _ in value)
        case _:
            raise TypeError(f"cannot unstructure {value.__class__.__name__}")


def convert(
    data: Any,
    type_hint: type[T],
    pointer: Pointer = Pointer.root,
    error_class: type[ValidationError] = ValidationError,
) -> T:
    value, issues = structure(data, type_hint, pointer)
    if issues:
        raise error_class(issues)
    return value


def validate(obj: Any, error_class: type[ValidationError] = ValidationError) -> None:
    """Re-check the constraints and invariants of a live struct."""
    convert(unstructure(obj), obj.__class__, error_class=error_class)


def dumps(obj: Any) -> bytes:
    return serialize(unstructure(obj))


def loads(
    data: bytes | str,
    type_hint: type[T],
    error_class: type[ValidationError] = ValidationError,
) -> T:
    return convert(deserialize(data), type_hint, error_class=error_class)
