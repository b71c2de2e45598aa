import hashlib
import struct
from typing import Any, Union

from src.core.exceptions import KeyExtractionError
from src.core.types import INT64_MAX, INT64_MIN

_INT_PREFIX = b"\x01"
_STR_PREFIX = b"\x02"
_BIAS = 1 << 63

Key = Union[int, str]


def encode_key(value: Any) -> bytes:
    """Order-preserving byte form of a primary key (ints sort before strings)."""
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise KeyExtractionError(f"primary key must be an int or a string, got {type(value).__name__}")
    if isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise KeyExtractionError(f"primary key {value} does not fit in 64 bits")
        return _INT_PREFIX + struct.pack(">Q", value + _BIAS)
    return _STR_PREFIX + value.encode("utf-8")


def decode_key(data: bytes) -> Key:
    if data[:1] == _INT_PREFIX:
        return struct.unpack(">Q", data[1:9])[0] - _BIAS
    if data[:1] == _STR_PREFIX:
        return data[1:].decode("utf-8")
    raise KeyExtractionError(f"unknown key encoding {data[:1]!r}")


def extract_key(doc: Any, primary_key: str) -> Key:
    if not isinstance(doc, dict):
        raise KeyExtractionError("document root must be an object")
    if primary_key not in doc:
        raise KeyExtractionError(f"document has no primary key field {primary_key!r}")
    value = doc[primary_key]
    encode_key(value)
    return value


def partition_of(key_bytes: bytes, partitions: int) -> int:
    """64-bit key hash modulo the partition count."""
    digest = hashlib.blake2b(key_bytes, digest_size=8).digest()
    return int.from_bytes(digest, "big") % partitions
