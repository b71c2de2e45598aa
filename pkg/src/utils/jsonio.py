import json
import logging
from typing import Any, Iterator, List, Tuple, TextIO

logger = logging.getLogger(__name__)


class JsonLineError(ValueError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


def _reject_duplicates(pairs: List[Tuple[str, Any]]) -> dict:
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise ValueError(f"duplicate key {key!r}")
        obj[key] = value
    return obj


def _reject_constant(name: str) -> Any:
    raise ValueError(f"{name} is not a JSON number")


def loads(text: str) -> Any:
    return json.loads(text, object_pairs_hook=_reject_duplicates, parse_constant=_reject_constant)


def read_ndjson(stream: TextIO, skip_bad_lines: bool = False) -> Iterator[Tuple[int, Any]]:
    """
    Yield ``(line_number, value)`` for every non-blank NDJSON line.

    Args:
        stream (TextIO): Source of newline-delimited JSON.
        skip_bad_lines (bool): Log and skip malformed lines instead of raising.

    Returns:
        Iterator[Tuple[int, Any]]: Parsed values with their 1-based line numbers.
    """
    for number, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            yield number, loads(line)
        except ValueError as e:
            if not skip_bad_lines:
                raise JsonLineError(number, str(e)) from e
            logger.warning("Skipping malformed line %d: %s", number, e)


def dumps_row(row: Any) -> str:
    return json.dumps(row, ensure_ascii=False, separators=(",", ":"))
