from typing import Union

from lru import LRU

__all__ = ["Pointer"]


T_PointerPart = Union[str, int]
T_PointerParts = tuple[T_PointerPart, ...]


class Pointer:
    """Location of one value inside a record, used to report where an issue was found.

    Instances are interned so pointers built repeatedly while walking large
    corpora share memory and hash once.
    """

    __slots__ = "parts", "_hash", "_path"
    _instance_cache = LRU(65535)
    root: "Pointer" = None

    def __new__(cls, parts: T_PointerParts = ()) -> "Pointer":
        cache = cls._instance_cache
        key = hash(parts)
        try:
            self = cache[key]
            if self.parts == parts:
                return self
        except KeyError:
            pass
        cache[key] = self = super().__new__(cls)
        self.parts = parts
        self._hash = key
        return self

    def path(self) -> str:
        try:
            return self._path
        except AttributeError:
            path = "$"
            for part in self.parts:
                if isinstance(part, int):
                    path += f"[{part}]"
                else:
                    path += f".{part}"
            self._path = path
            return path

    def __str__(self) -> str:
        return self.path()

    def __repr__(self) -> str:
        return f"Pointer({self.path()!r})"

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if other.__class__ is not Pointer:
            return NotImplemented
        return self.parts == other.parts

    def __lt__(self, other: "Pointer") -> bool:
        return tuple(map(str, self.parts)) < tuple(map(str, other.parts))

    def __truediv__(self, part: T_PointerPart) -> "Pointer":
        return Pointer(self.parts + (part,))

    @classmethod
    def parse(cls, dotted: str) -> "Pointer":
        """Build a pointer from a dotted path such as ``train.lr`` or ``spans.3.values``."""
        if not dotted or dotted == "$":
            return cls.root
        parts: list[T_PointerPart] = []
        for part in dotted.removeprefix("$.").split("."):
            if not part:
                raise ValueError(f"empty segment in path {dotted!r}")
            parts.append(int(part) if part.isdigit() else part)
        return cls(tuple(parts))


Pointer.root = Pointer(())
