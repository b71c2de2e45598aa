"""
On-disk LSM components.

A component is a page file ``c_<lo>_<hi>.dat`` (plus ``.laf`` when compressed):

    entries | metadata region | padding | trailer

Entries are ``keylen u16 | key | kind u8`` followed, for records, by
``reclen u32 | VBRecord``. The metadata region is ``crc32c u32 | msgpack map``.
The trailer fills the last 20 bytes of the last page:
``"CMET" | meta_start u64 | meta_length u32 | 3 reserved | validity``.
The last page is always stored raw so the validity byte is set in place, after
every other byte of the component is on disk.
"""
import logging
import os
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import google_crc32c
import msgpack

from src.core.exceptions import ComponentCorruptError, PageCorruptError
from src.core.faults import crash_point
from src.services.page_compression import laf_path, open_page_reader, open_page_writer
from src.services.schema_store import SchemaStore, deserialize_schema
from src.services.vb_record import VBRecord

logger = logging.getLogger(__name__)

ENTRY_RECORD = 1
ENTRY_TOMBSTONE = 2

VALID = 0xFF
INVALID = 0x00

TRAILER_MAGIC = b"CMET"
_TRAILER = struct.Struct("<4sQI3xB")
TRAILER_SIZE = _TRAILER.size
_KEY_LEN = struct.Struct("<H")
_REC_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")

_NAME = re.compile(r"^c_(\d{8})_(\d{8})\.dat$")

Entry = Tuple[bytes, int, Optional[VBRecord]]


@dataclass(frozen=True, order=True)
class ComponentId:
    lo: int
    hi: int

    @property
    def file_name(self) -> str:
        return f"c_{self.lo:08d}_{self.hi:08d}.dat"

    def covers(self, other: "ComponentId") -> bool:
        return self.lo <= other.lo and other.hi <= self.hi and self != other

    def __str__(self) -> str:
        return f"[{self.lo},{self.hi}]"

    @classmethod
    def parse(cls, file_name: str) -> Optional["ComponentId"]:
        match = _NAME.match(file_name)
        if match is None:
            return None
        return cls(int(match.group(1)), int(match.group(2)))


@dataclass
class ComponentMeta:
    lo: int
    hi: int
    entry_count: int
    record_count: int
    max_lsn: int
    data_length: int
    min_key: Optional[bytes]
    max_key: Optional[bytes]
    schema: Optional[bytes]

    def to_region(self) -> bytes:
        body = msgpack.packb(
            {
                "lo": self.lo,
                "hi": self.hi,
                "entry_count": self.entry_count,
                "record_count": self.record_count,
                "max_lsn": self.max_lsn,
                "data_length": self.data_length,
                "min_key": self.min_key,
                "max_key": self.max_key,
                "schema": self.schema,
            },
            use_bin_type=True,
        )
        return _CRC.pack(google_crc32c.value(body)) + body

    @classmethod
    def from_region(cls, region: bytes) -> "ComponentMeta":
        if len(region) < _CRC.size:
            raise ValueError("metadata region truncated")
        (crc,) = _CRC.unpack_from(region)
        body = region[_CRC.size:]
        if google_crc32c.value(body) != crc:
            raise ValueError("metadata checksum mismatch")
        fields = msgpack.unpackb(body, raw=False)
        return cls(**fields)


def encode_entry(key: bytes, kind: int, rec: Optional[VBRecord]) -> bytes:
    head = _KEY_LEN.pack(len(key)) + key + bytes((kind,))
    if kind == ENTRY_RECORD:
        return head + _REC_LEN.pack(len(rec.data)) + rec.data
    return head


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def write_component(
    directory: Path,
    cid: ComponentId,
    entries: Iterable[Entry],
    schema_blob: Optional[bytes],
    max_lsn: int,
    codec: Optional[str],
    page_size: int,
    stage: str = "flush",
    fsync: bool = True,
) -> Path:
    """
    Write a component and set its validity byte last.

    Args:
        directory (Path): Partition directory.
        cid (ComponentId): Id range of the new component.
        entries (Iterable[Entry]): ``(key, kind, record)`` in ascending key order.
        schema_blob (Optional[bytes]): Serialized schema to persist, if any.
        max_lsn (int): Largest WAL lsn whose effect the component contains.
        codec (Optional[str]): Page codec name, or None for plain pages.
        page_size (int): Logical page size.
        stage (str): ``flush`` or ``merge``; prefixes the crash points.
        fsync (bool): Issue storage flush barriers.

    Returns:
        Path: The VALID component file.
    """
    path = directory / cid.file_name
    writer = open_page_writer(path, codec, page_size)
    buffer = bytearray()
    page_index = 0
    entry_count = record_count = 0
    min_key = max_key = None
    try:
        for key, kind, rec in entries:
            if max_key is not None and key <= max_key:
                raise ValueError("component entries must be in ascending key order")
            if min_key is None:
                min_key = key
            max_key = key
            entry_count += 1
            if kind == ENTRY_RECORD:
                record_count += 1
            buffer += encode_entry(key, kind, rec)
            while len(buffer) >= page_size:
                writer.write_page(page_index, bytes(buffer[:page_size]))
                del buffer[:page_size]
                page_index += 1
        data_length = page_index * page_size + len(buffer)
        crash_point(f"{stage}.after_data")

        meta = ComponentMeta(
            cid.lo, cid.hi, entry_count, record_count, max_lsn, data_length, min_key, max_key, schema_blob,
        )
        region = meta.to_region()
        buffer += region
        padded = -(-(len(buffer) + TRAILER_SIZE) // page_size) * page_size
        buffer += b"\x00" * (padded - len(buffer) - TRAILER_SIZE)
        buffer += _TRAILER.pack(TRAILER_MAGIC, data_length, len(region), INVALID)
        while len(buffer) > page_size:
            writer.write_page(page_index, bytes(buffer[:page_size]))
            del buffer[:page_size]
            page_index += 1
        writer.write_raw_page(page_index, bytes(buffer))
        validity_at = writer.raw_page_offset(page_index) + page_size - 1
        writer.close(fsync=fsync)
    except BaseException:
        writer.close(fsync=False)
        raise
    if fsync:
        _fsync_dir(directory)
    crash_point(f"{stage}.before_validity")

    with open(path, "r+b") as f:
        f.seek(validity_at)
        f.write(bytes((VALID,)))
        f.flush()
        if fsync:
            os.fsync(f.fileno())
    logger.info(
        "Wrote component %s: %d entries (%d records), %d pages",
        cid, entry_count, record_count, page_index + 1,
    )
    crash_point(f"{stage}.after_validity")
    return path


def remove_component_files(path: Path) -> None:
    for target in (path, laf_path(path)):
        try:
            target.unlink()
        except FileNotFoundError:
            pass


class DiskComponent:
    """Read side of one component file."""

    def __init__(self, path, page_size: int, laf_page_size: int = 128 * 1024, cache_pages: int = 64):
        self.path = Path(path)
        self.cid = ComponentId.parse(self.path.name)
        if self.cid is None:
            raise ValueError(f"{self.path.name} is not a component file name")
        self.page_size = page_size
        self._reader = open_page_reader(self.path, page_size, laf_page_size, cache_pages)
        self._lock = threading.Lock()
        self._index: Optional[Dict[bytes, Tuple[int, int, int]]] = None
        self._schema: Optional[SchemaStore] = None
        self.valid = False
        self.meta: Optional[ComponentMeta] = None
        try:
            if self._reader.page_count == 0:
                raise PageCorruptError("component has no pages")
            last = self._reader.read_page(self._reader.page_count - 1)
            magic, meta_start, meta_length, validity = _TRAILER.unpack_from(last, len(last) - TRAILER_SIZE)
        except Exception:
            self._reader.close()
            raise
        if magic != TRAILER_MAGIC:
            self._reader.close()
            raise PageCorruptError(f"component {self.cid} has no trailer")
        self.valid = validity == VALID
        self._meta_start = meta_start
        self._meta_length = meta_length

    def load_meta(self) -> ComponentMeta:
        """Decode the metadata region; a VALID component with bad metadata is fatal."""
        if self.meta is None:
            try:
                region = self.read_bytes(self._meta_start, self._meta_length)
                meta = ComponentMeta.from_region(region)
                if (meta.lo, meta.hi) != (self.cid.lo, self.cid.hi):
                    raise ValueError(f"metadata names range [{meta.lo},{meta.hi}]")
            except Exception as e:
                raise ComponentCorruptError(str(self.cid), str(e)) from e
            self.meta = meta
        return self.meta

    @property
    def schema(self) -> Optional[SchemaStore]:
        meta = self.load_meta()
        if meta.schema is None:
            return None
        if self._schema is None:
            try:
                self._schema = deserialize_schema(meta.schema)
            except Exception as e:
                raise ComponentCorruptError(str(self.cid), f"schema blob: {e}") from e
        return self._schema

    @property
    def size_bytes(self) -> int:
        size = self.path.stat().st_size
        laf = laf_path(self.path)
        if laf.exists():
            size += laf.stat().st_size
        return size

    @property
    def physical_reads(self) -> int:
        return self._reader.physical_reads

    def read_bytes(self, start: int, length: int) -> bytes:
        out = bytearray()
        page = start // self.page_size
        skip = start % self.page_size
        while len(out) < length:
            data = self._reader.read_page(page)
            out += data[skip:skip + length - len(out)]
            skip = 0
            page += 1
        return bytes(out)

    def _pages(self) -> Iterator[bytes]:
        data_length = self.load_meta().data_length
        pages = -(-data_length // self.page_size)
        remaining = data_length
        for i in range(pages):
            page = self._reader.read_page(i)
            yield page[:min(remaining, self.page_size)]
            remaining -= self.page_size

    def _iter_located(self, with_records: bool) -> Iterator[Tuple[bytes, int, int, int, Optional[VBRecord]]]:
        """Yield ``(key, kind, record offset, record length, record)`` in key order."""
        buffer = bytearray()
        pages = self._pages()
        pos = 0
        base = 0

        def need(n: int) -> bool:
            nonlocal buffer, pos, base
            while len(buffer) - pos < n:
                try:
                    chunk = next(pages)
                except StopIteration:
                    return False
                del buffer[:pos]
                base += pos
                pos = 0
                buffer += chunk
            return True

        while need(_KEY_LEN.size):
            (key_len,) = _KEY_LEN.unpack_from(buffer, pos)
            if not need(_KEY_LEN.size + key_len + 1):
                raise ComponentCorruptError(str(self.cid), "entry truncated")
            key = bytes(buffer[pos + _KEY_LEN.size:pos + _KEY_LEN.size + key_len])
            kind = buffer[pos + _KEY_LEN.size + key_len]
            pos += _KEY_LEN.size + key_len + 1
            if kind == ENTRY_TOMBSTONE:
                yield key, kind, 0, 0, None
                continue
            if kind != ENTRY_RECORD or not need(_REC_LEN.size):
                raise ComponentCorruptError(str(self.cid), "bad entry header")
            (rec_len,) = _REC_LEN.unpack_from(buffer, pos)
            pos += _REC_LEN.size
            if not need(rec_len):
                raise ComponentCorruptError(str(self.cid), "record truncated")
            rec = VBRecord(bytes(buffer[pos:pos + rec_len])) if with_records else None
            yield key, kind, base + pos, rec_len, rec
            pos += rec_len

    def iter_entries(self) -> Iterator[Entry]:
        """Stream ``(key, kind, record)`` in key order."""
        for key, kind, _, _, rec in self._iter_located(with_records=True):
            yield key, kind, rec

    def _ensure_index(self) -> Dict[bytes, Tuple[int, int, int]]:
        with self._lock:
            if self._index is None:
                self._index = {
                    key: (kind, offset, length)
                    for key, kind, offset, length, _ in self._iter_located(with_records=False)
                }
            return self._index

    def get(self, key: bytes) -> Optional[Tuple[int, Optional[VBRecord]]]:
        """``(kind, record)`` stored for ``key`` here, or None."""
        meta = self.load_meta()
        if meta.min_key is None or not meta.min_key <= key <= meta.max_key:
            return None
        located = self._ensure_index().get(key)
        if located is None:
            return None
        kind, offset, length = located
        if kind == ENTRY_TOMBSTONE:
            return kind, None
        return kind, VBRecord(self.read_bytes(offset, length))

    def keys(self) -> List[bytes]:
        return list(self._ensure_index().keys())

    def close(self) -> None:
        self._reader.close()

    def __repr__(self) -> str:
        return f"<DiskComponent {self.cid} {'VALID' if self.valid else 'INVALID'}>"
