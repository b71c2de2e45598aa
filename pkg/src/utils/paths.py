import re
from dataclasses import dataclass
from typing import Any, Tuple, Union

from src.core.types import MISSING


@dataclass(frozen=True)
class Field:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Index:
    i: int

    def __str__(self) -> str:
        return f"[{self.i}]"


@dataclass(frozen=True)
class Wildcard:
    def __str__(self) -> str:
        return "[*]"


Step = Union[Field, Index, Wildcard]


@dataclass(frozen=True)
class PathExpr:
    steps: Tuple[Step, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("path expression must have at least one step")

    def __str__(self) -> str:
        out = ""
        for step in self.steps:
            if isinstance(step, Field):
                out += ("." if out else "") + step.name
            else:
                out += str(step)
        return out

    @property
    def wildcard_count(self) -> int:
        return sum(1 for s in self.steps if isinstance(s, Wildcard))

    def split_at_wildcard(self) -> Tuple[Tuple[Step, ...], Tuple[Step, ...]]:
        """Steps before and after the first wildcard."""
        for i, step in enumerate(self.steps):
            if isinstance(step, Wildcard):
                return self.steps[:i], self.steps[i + 1:]
        return self.steps, ()


_TOKEN = re.compile(r"\[(\*|\d+)\]|\.?([^.\[\]]+)")


def parse_path(text: str) -> PathExpr:
    """Parse ``a.b[0].c`` / ``a[*].b`` into a :class:`PathExpr`."""
    if not text:
        raise ValueError("empty path expression")
    steps = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None or match.end() == pos:
            raise ValueError(f"bad path expression {text!r} at {pos}")
        bracket, name = match.groups()
        if bracket == "*":
            steps.append(Wildcard())
        elif bracket is not None:
            steps.append(Index(int(bracket)))
        else:
            steps.append(Field(name))
        pos = match.end()
    return PathExpr(tuple(steps))


def navigate(value: Any, steps: Tuple[Step, ...]) -> Any:
    """Walk a decoded document along ``steps``; absent prefixes give MISSING."""
    if not steps:
        return value
    step, rest = steps[0], steps[1:]
    if isinstance(step, Field):
        if isinstance(value, dict) and step.name in value:
            return navigate(value[step.name], rest)
        return MISSING
    if not isinstance(value, list):
        return MISSING
    if isinstance(step, Index):
        if step.i < len(value):
            return navigate(value[step.i], rest)
        return MISSING
    results = []
    for item in value:
        found = navigate(item, rest)
        if found is not MISSING:
            results.append(found)
    return results
