"""
Write-ahead log of one partition.

Each record is framed as ``length u32 | crc32c u32 | payload`` where the payload is
a msgpack array ``[lsn, op, key, doc]``. Replay stops at the first short frame or
checksum mismatch and cuts the file back to the last good record.
"""
import logging
import os
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Any, List, Optional

import google_crc32c
import msgpack

from src.core.exceptions import WalCorruptError
from src.core.faults import crash_point

logger = logging.getLogger(__name__)

_FRAME = struct.Struct("<II")


class WalOp(IntEnum):
    INSERT = 1
    DELETE = 2
    UPSERT = 3


@dataclass(frozen=True)
class WalRecord:
    lsn: int
    op: WalOp
    key: bytes
    doc: Any = None

    def to_bytes(self) -> bytes:
        payload = msgpack.packb([self.lsn, int(self.op), self.key, self.doc], use_bin_type=True)
        return _FRAME.pack(len(payload), google_crc32c.value(payload)) + payload

    @classmethod
    def from_payload(cls, payload: bytes) -> "WalRecord":
        try:
            lsn, op, key, doc = msgpack.unpackb(payload, raw=False, strict_map_key=False)
            return cls(lsn, WalOp(op), key, doc)
        except Exception as e:
            raise WalCorruptError(f"undecodable WAL payload: {e}") from e


def read_records(path: Path) -> tuple:
    """Return ``(records, good_length)`` for the valid prefix of a WAL file."""
    records: List[WalRecord] = []
    if not path.exists():
        return records, 0
    data = path.read_bytes()
    pos = 0
    while pos + _FRAME.size <= len(data):
        length, checksum = _FRAME.unpack_from(data, pos)
        payload = data[pos + _FRAME.size:pos + _FRAME.size + length]
        if len(payload) != length or google_crc32c.value(payload) != checksum:
            logger.warning("WAL %s: bad record at byte %d, replay stops", path.name, pos)
            break
        try:
            record = WalRecord.from_payload(payload)
        except WalCorruptError as e:
            logger.warning("WAL %s: %s at byte %d, replay stops", path.name, e, pos)
            break
        if records and record.lsn <= records[-1].lsn:
            logger.warning("WAL %s: lsn %d not increasing at byte %d, replay stops", path.name, record.lsn, pos)
            break
        records.append(record)
        pos += _FRAME.size + length
    return records, pos


class WriteAheadLog:
    def __init__(self, path, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        records, good = read_records(self.path)
        self._pending = records
        self.last_lsn = records[-1].lsn if records else 0
        if self.path.exists() and good != self.path.stat().st_size:
            logger.warning("Truncating WAL %s to %d bytes", self.path.name, good)
            with open(self.path, "r+b") as f:
                f.truncate(good)
        self._file = open(self.path, "ab")

    def replay(self) -> List[WalRecord]:
        """Records found at open time, in lsn order."""
        return list(self._pending)

    def advance_to(self, lsn: int) -> None:
        """Never hand out an lsn at or below ``lsn`` (already persisted elsewhere)."""
        self.last_lsn = max(self.last_lsn, lsn)

    def append(self, op: WalOp, key: bytes, doc: Any = None) -> WalRecord:
        """
        Durably append one operation.

        Args:
            op (WalOp): Operation kind.
            key (bytes): Encoded primary key.
            doc (Any): Full document for INSERT/UPSERT, None for DELETE.

        Returns:
            WalRecord: The appended record with its lsn.
        """
        with self._lock:
            record = WalRecord(self.last_lsn + 1, op, key, doc)
            self._file.write(record.to_bytes())
            self._file.flush()
            if self.fsync:
                os.fsync(self._file.fileno())
            self.last_lsn = record.lsn
        crash_point("wal.after_append")
        return record

    def truncate_through(self, lsn: int) -> None:
        """Drop records with lsn <= ``lsn``; newer ones are rewritten."""
        with self._lock:
            self._file.close()
            records, _ = read_records(self.path)
            keep = [r for r in records if r.lsn > lsn]
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "wb") as f:
                f.write(b"".join(r.to_bytes() for r in keep))
                f.flush()
                if self.fsync:
                    os.fsync(f.fileno())
            os.replace(tmp, self.path)
            self._file = open(self.path, "ab")
            self._pending = []
        logger.debug("WAL %s truncated through lsn %d (%d kept)", self.path.name, lsn, len(keep))

    def close(self) -> None:
        with self._lock:
            if not self._file.closed:
                self._file.close()

    @property
    def size_bytes(self) -> int:
        return self.path.stat().st_size if self.path.exists() else 0
