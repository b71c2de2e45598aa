import io
from typing import List, Sequence, Tuple

import numpy as np

MAX_BIT_WIDTH = 16


def bit_width(max_value: int) -> int:
    """Bits needed for values up to ``max_value``: bit length of the exclusive bound."""
    return (max_value + 1).bit_length()


def packed_size(count: int, width: int) -> int:
    return (count * width + 7) // 8


def pack_bits(values: Sequence[int], width: int) -> bytes:
    """Pack unsigned ints MSB-first into ``width``-bit slots, padded to a byte."""
    if not values or width == 0:
        return b""
    arr = np.asarray(values, dtype=np.uint32)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint32)
    bits = ((arr[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def unpack_bits(data: bytes, count: int, width: int) -> List[int]:
    """Inverse of :func:`pack_bits`; ``data`` must hold at least ``count`` slots."""
    if count == 0 or width == 0:
        return [0] * count
    needed = packed_size(count, width)
    if len(data) < needed:
        raise ValueError(f"bit vector truncated: need {needed} bytes, have {len(data)}")
    raw = np.frombuffer(bytes(data[:needed]), dtype=np.uint8)
    bits = np.unpackbits(raw, count=count * width).reshape(count, width)
    weights = (1 << np.arange(width - 1, -1, -1, dtype=np.uint32)).astype(np.uint32)
    return (bits.astype(np.uint32) @ weights).tolist()


def write_varint(out: io.BytesIO, value: int) -> None:
    if value < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.write(bytes((byte | 0x80,)))
        else:
            out.write(bytes((byte,)))
            return


def read_varint(data: bytes, pos: int) -> Tuple[int, int]:
    """Read an unsigned LEB128 varint, returning ``(value, next_pos)``."""
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise ValueError("varint truncated")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")
