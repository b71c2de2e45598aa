from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Tuple


class TypeTag(IntEnum):
    """Type tags of the vector-based record format (one byte each)."""

    OBJECT = 0
    ARRAY = 1
    STRING = 2
    INT64 = 3
    DOUBLE = 4
    BOOLEAN = 5
    NULL = 6
    CLOSE_NEST = 7
    EOV = 8


NESTING_TAGS = frozenset({TypeTag.OBJECT, TypeTag.ARRAY})
CONTROL_TAGS = frozenset({TypeTag.CLOSE_NEST, TypeTag.EOV})

# Bytes taken in the fixed-length values vector
FIXED_WIDTHS: Dict[int, int] = {
    TypeTag.INT64: 8,
    TypeTag.DOUBLE: 8,
    TypeTag.BOOLEAN: 1,
    TypeTag.NULL: 0,
}

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class _Missing:
    """Result of a path whose prefix does not exist in a record."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


@dataclass(frozen=True)
class DeclaredKeySpec:
    """Root-level fields declared with the dataset, referenced by index."""

    names: Tuple[str, ...] = ()

    @classmethod
    def of(cls, *names: str) -> "DeclaredKeySpec":
        return cls(tuple(names))

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            return -1

    def name_at(self, index: int) -> str:
        if index >= len(self.names):
            raise IndexError(f"declared field index {index} out of range")
        return self.names[index]

    def as_mapping(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}
