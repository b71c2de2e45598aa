"""
Page-level compression with a Look-Aside File (LAF).

Logical pages have a fixed size. Each page is compressed into a variable-size
extent appended to the data file; the LAF sidecar (``<data>.laf``) holds one
12-byte ``(offset, length)`` entry per page. A page that does not shrink is stored
raw and flagged in the top bit of its length.

LAF file: magic ``CLAF`` | codec id u8 | logical page size u32 | entry count u64 | entries.
"""
import bz2
import logging
import lzma
import os
import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from src.core.exceptions import PageCorruptError, PageOrderError

logger = logging.getLogger(__name__)

LAF_MAGIC = b"CLAF"
LAF_SUFFIX = ".laf"
_LAF_HEADER = struct.Struct("<4sBIQ")
_LAF_ENTRY = struct.Struct("<QI")
LAF_ENTRY_SIZE = _LAF_ENTRY.size
RAW_FLAG = 1 << 31


def _identity(data: bytes) -> bytes:
    return data


def _zlib_compress(data: bytes) -> bytes:
    return zlib.compress(data, 6)


def _bz2_compress(data: bytes) -> bytes:
    return bz2.compress(data, 9)


# codec id -> (name, compress, decompress)
CODECS: Dict[int, Tuple[str, Callable[[bytes], bytes], Callable[[bytes], bytes]]] = {
    0: ("identity", _identity, _identity),
    1: ("zlib", _zlib_compress, zlib.decompress),
    2: ("bz2", _bz2_compress, bz2.decompress),
    3: ("lzma", lzma.compress, lzma.decompress),
}
CODEC_IDS = {name: cid for cid, (name, _, _) in CODECS.items()}
DEFAULT_CODEC = "zlib"


def codec_id(name: str) -> int:
    try:
        return CODEC_IDS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; choose one of {sorted(CODEC_IDS)}") from None


def laf_entries_per_page(laf_page_size: int) -> int:
    """Entries that fit one LAF page (131072 // 12 == 10922)."""
    return laf_page_size // LAF_ENTRY_SIZE


@dataclass(frozen=True)
class LafEntry:
    offset: int
    length: int
    raw: bool = False

    def pack(self) -> bytes:
        return _LAF_ENTRY.pack(self.offset, self.length | (RAW_FLAG if self.raw else 0))

    @classmethod
    def unpack_from(cls, data: bytes, pos: int) -> "LafEntry":
        offset, length = _LAF_ENTRY.unpack_from(data, pos)
        return cls(offset, length & ~RAW_FLAG, bool(length & RAW_FLAG))


def laf_path(data_path) -> Path:
    data_path = Path(data_path)
    return data_path.with_name(data_path.name + LAF_SUFFIX)


class CompressedFileWriter:
    """Append-only writer of compressed pages and their LAF."""

    def __init__(self, data_path, codec: str = DEFAULT_CODEC, page_size: int = 128 * 1024):
        self.data_path = Path(data_path)
        self.codec_id = codec_id(codec)
        _, self._compress, _ = CODECS[self.codec_id]
        self.page_size = page_size
        self.entries: List[LafEntry] = []
        self._offset = 0
        self._file = open(self.data_path, "wb")

    @property
    def page_count(self) -> int:
        return len(self.entries)

    def _check(self, page_index: int, page: bytes) -> None:
        if page_index != len(self.entries):
            raise PageOrderError(f"page {page_index} written after {len(self.entries) - 1}")
        if len(page) != self.page_size:
            raise ValueError(f"page is {len(page)} bytes, logical page size is {self.page_size}")

    def _append(self, extent: bytes, raw: bool) -> None:
        self._file.write(extent)
        self.entries.append(LafEntry(self._offset, len(extent), raw))
        self._offset += len(extent)

    def write_page(self, page_index: int, page: bytes) -> LafEntry:
        """
        Compress and append one logical page.

        Args:
            page_index (int): Must equal the number of pages already written.
            page (bytes): Exactly one logical page.

        Returns:
            LafEntry: Location of the stored extent.
        """
        self._check(page_index, page)
        compressed = self._compress(page)
        if len(compressed) < len(page):
            self._append(compressed, raw=False)
        else:
            self._append(bytes(page), raw=True)
        return self.entries[-1]

    def write_raw_page(self, page_index: int, page: bytes) -> LafEntry:
        """Append a page uncompressed so it can later be patched in place."""
        self._check(page_index, page)
        self._append(bytes(page), raw=True)
        return self.entries[-1]

    def raw_page_offset(self, page_index: int) -> int:
        entry = self.entries[page_index]
        if not entry.raw:
            raise PageCorruptError(f"page {page_index} is not stored raw")
        return entry.offset

    def close(self, fsync: bool = True) -> None:
        if self._file.closed:
            return
        self._file.flush()
        if fsync:
            os.fsync(self._file.fileno())
        self._file.close()
        with open(laf_path(self.data_path), "wb") as laf:
            laf.write(_LAF_HEADER.pack(LAF_MAGIC, self.codec_id, self.page_size, len(self.entries)))
            laf.write(b"".join(entry.pack() for entry in self.entries))
            laf.flush()
            if fsync:
                os.fsync(laf.fileno())
        logger.debug("Wrote %d compressed pages to %s", len(self.entries), self.data_path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CompressedFileReader:
    """Random page reader; LAF pages are read on demand through an LRU cache."""

    def __init__(self, data_path, laf_page_size: int = 128 * 1024, cache_pages: int = 64):
        self.data_path = Path(data_path)
        self._laf = open(laf_path(self.data_path), "rb")
        header = self._laf.read(_LAF_HEADER.size)
        if len(header) != _LAF_HEADER.size:
            raise PageCorruptError(f"LAF of {self.data_path.name} truncated")
        magic, cid, page_size, count = _LAF_HEADER.unpack(header)
        if magic != LAF_MAGIC:
            raise PageCorruptError(f"bad LAF magic {magic!r}")
        if cid not in CODECS:
            raise PageCorruptError(f"unknown codec id {cid}")
        self.codec_id = cid
        _, _, self._decompress = CODECS[cid]
        self.page_size = page_size
        self.page_count = count
        self.entries_per_laf_page = laf_entries_per_page(laf_page_size)
        self._data = open(self.data_path, "rb")
        self._lock = threading.Lock()
        self._cache: "OrderedDict[int, List[LafEntry]]" = OrderedDict()
        self._cache_pages = max(1, cache_pages)
        self.physical_reads = 0
        self.cache_hits = 0

    def _laf_page(self, laf_index: int) -> List[LafEntry]:
        cached = self._cache.get(laf_index)
        if cached is not None:
            self._cache.move_to_end(laf_index)
            self.cache_hits += 1
            return cached
        first = laf_index * self.entries_per_laf_page
        count = min(self.entries_per_laf_page, self.page_count - first)
        self._laf.seek(_LAF_HEADER.size + first * LAF_ENTRY_SIZE)
        raw = self._laf.read(count * LAF_ENTRY_SIZE)
        self.physical_reads += 1
        if len(raw) != count * LAF_ENTRY_SIZE:
            raise PageCorruptError(f"LAF page {laf_index} truncated")
        entries = [LafEntry.unpack_from(raw, i * LAF_ENTRY_SIZE) for i in range(count)]
        self._cache[laf_index] = entries
        if len(self._cache) > self._cache_pages:
            self._cache.popitem(last=False)
        return entries

    def entry(self, page_index: int) -> LafEntry:
        if not 0 <= page_index < self.page_count:
            raise IndexError(f"page {page_index} out of range ({self.page_count} pages)")
        with self._lock:
            laf_page = self._laf_page(page_index // self.entries_per_laf_page)
        return laf_page[page_index % self.entries_per_laf_page]

    def read_page(self, page_index: int) -> bytes:
        """
        Read one logical page.

        Args:
            page_index (int): Page to read.

        Returns:
            bytes: Exactly ``page_size`` bytes.
        """
        with self._lock:
            if not 0 <= page_index < self.page_count:
                raise IndexError(f"page {page_index} out of range ({self.page_count} pages)")
            entry = self._laf_page(page_index // self.entries_per_laf_page)[page_index % self.entries_per_laf_page]
            self._data.seek(entry.offset)
            extent = self._data.read(entry.length)
            self.physical_reads += 1
        if len(extent) != entry.length:
            raise PageCorruptError(f"extent of page {page_index} truncated")
        if entry.raw:
            page = extent
        else:
            try:
                page = self._decompress(extent)
            except Exception as e:
                raise PageCorruptError(f"page {page_index} does not decompress: {e}") from e
        if len(page) != self.page_size:
            raise PageCorruptError(f"page {page_index} is {len(page)} bytes, expected {self.page_size}")
        return page

    def raw_page_offset(self, page_index: int) -> int:
        entry = self.entry(page_index)
        if not entry.raw:
            raise PageCorruptError(f"page {page_index} is not stored raw")
        return entry.offset

    def close(self) -> None:
        self._data.close()
        self._laf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PlainPageWriter:
    """Uncompressed page file with the same interface as the compressed writer."""

    def __init__(self, data_path, page_size: int = 128 * 1024):
        self.data_path = Path(data_path)
        self.page_size = page_size
        self.page_count = 0
        self._file = open(self.data_path, "wb")

    def write_page(self, page_index: int, page: bytes) -> None:
        if page_index != self.page_count:
            raise PageOrderError(f"page {page_index} written after {self.page_count - 1}")
        if len(page) != self.page_size:
            raise ValueError(f"page is {len(page)} bytes, logical page size is {self.page_size}")
        self._file.write(page)
        self.page_count += 1

    write_raw_page = write_page

    def raw_page_offset(self, page_index: int) -> int:
        return page_index * self.page_size

    def close(self, fsync: bool = True) -> None:
        if self._file.closed:
            return
        self._file.flush()
        if fsync:
            os.fsync(self._file.fileno())
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PlainPageReader:
    def __init__(self, data_path, page_size: int = 128 * 1024):
        self.data_path = Path(data_path)
        self.page_size = page_size
        size = self.data_path.stat().st_size
        if size % page_size:
            raise PageCorruptError(f"{self.data_path.name} is not a whole number of pages")
        self.page_count = size // page_size
        self._file = open(self.data_path, "rb")
        self._lock = threading.Lock()
        self.physical_reads = 0

    def read_page(self, page_index: int) -> bytes:
        if not 0 <= page_index < self.page_count:
            raise IndexError(f"page {page_index} out of range ({self.page_count} pages)")
        with self._lock:
            self._file.seek(page_index * self.page_size)
            page = self._file.read(self.page_size)
            self.physical_reads += 1
        if len(page) != self.page_size:
            raise PageCorruptError(f"page {page_index} truncated")
        return page

    def raw_page_offset(self, page_index: int) -> int:
        return page_index * self.page_size

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_page_writer(data_path, codec: Optional[str], page_size: int):
    if codec is None:
        return PlainPageWriter(data_path, page_size)
    return CompressedFileWriter(data_path, codec, page_size)


def open_page_reader(data_path, page_size: int, laf_page_size: int = 128 * 1024, cache_pages: int = 64):
    """Open a page file, compressed when a LAF sidecar exists."""
    if laf_path(data_path).exists():
        return CompressedFileReader(data_path, laf_page_size, cache_pages)
    return PlainPageReader(data_path, page_size)


def compressed_size(stream: bytes, codec: Optional[str], page_size: int) -> int:
    """
    Bytes a stream would occupy as a page file (LAF included when compressed).

    Args:
        stream (bytes): Logical content; the last page is zero-padded.
        codec (Optional[str]): Codec name, or None for plain pages.
        page_size (int): Logical page size.

    Returns:
        int: Data plus LAF bytes.
    """
    pages = max(1, -(-len(stream) // page_size))
    if codec is None:
        return pages * page_size
    _, compress, _ = CODECS[codec_id(codec)]
    total = _LAF_HEADER.size + pages * LAF_ENTRY_SIZE
    for i in range(pages):
        page = stream[i * page_size:(i + 1) * page_size].ljust(page_size, b"\x00")
        total += min(len(compress(page)), page_size)
    return total
