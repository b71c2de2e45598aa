"""
LSM engine of one partition.

Writes go to the WAL and then to an in-memory component of uncompacted records.
A flush infers the schema of the flushed records, compacts them and writes a new
disk component whose metadata carries the schema. Deletes and upserts carry the
anti-schema of the version they replace; the anti-schema is applied at flush.
Merges keep the newest version of each key and the newest input's schema.
"""
import bisect
import heapq
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

from src.core.exceptions import ComponentCorruptError, DuplicateKeyError, VBStoreError
from src.core.types import DeclaredKeySpec
from src.services.component import (
    ENTRY_RECORD,
    ENTRY_TOMBSTONE,
    ComponentId,
    DiskComponent,
    remove_component_files,
    write_component,
)
from src.services.merge_policy import ComponentSize, PrefixMergePolicy
from src.services.page_compression import LAF_SUFFIX
from src.services.schema_store import (
    SchemaNode,
    SchemaStore,
    apply_anti_schema,
    extract_anti_schema,
    infer_schema,
    serialize_schema,
)
from src.services.vb_record import VBRecord, compact, decode, encode
from src.services.wal import WalOp, WalRecord, WriteAheadLog
from src.utils.keys import encode_key, extract_key

logger = logging.getLogger(__name__)

WAL_FILE = "wal.log"
_ENTRY_OVERHEAD = 48


@dataclass
class EngineOptions:
    primary_key: str
    declared: DeclaredKeySpec
    memtable_bytes: int = 8 * 1024 * 1024
    codec: Optional[str] = None
    page_size: int = 128 * 1024
    laf_page_size: int = 128 * 1024
    laf_cache_pages: int = 64
    compactor: bool = True
    merge_max_bytes: int = 64 * 1024 * 1024
    merge_tolerable_count: int = 5
    auto_merge: bool = True
    wal_fsync: bool = True

    @classmethod
    def from_settings(cls, settings, primary_key: str, declared: DeclaredKeySpec, compactor: bool = True,
                      **overrides) -> "EngineOptions":
        values = dict(
            primary_key=primary_key,
            declared=declared,
            memtable_bytes=settings.MEMTABLE_BYTES,
            codec=settings.codec_name,
            page_size=settings.PAGE_SIZE,
            laf_page_size=settings.LAF_PAGE_SIZE,
            laf_cache_pages=settings.LAF_CACHE_PAGES,
            compactor=compactor,
            merge_max_bytes=settings.MERGE_MAX_BYTES,
            merge_tolerable_count=settings.MERGE_TOLERABLE_COUNT,
            wal_fsync=settings.WAL_FSYNC,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class MemEntry:
    record: Optional[VBRecord]
    anti: Optional[SchemaNode]
    lsn: int

    @property
    def size(self) -> int:
        return _ENTRY_OVERHEAD + (len(self.record.data) if self.record is not None else 0)


@dataclass
class EngineCounters:
    primary_lookups: int = 0
    pk_probes: int = 0
    flushes: int = 0
    merges: int = 0


@dataclass
class ScanItem:
    key: bytes
    record: VBRecord
    source: Optional[ComponentId]
    schema: Optional[SchemaStore]


@dataclass
class _Sealed:
    """A swapped-out memtable and the component computed from it."""

    memtable: Dict[bytes, MemEntry]
    keys: List[bytes]
    cid: ComponentId
    entries: List[tuple]
    schema_blob: Optional[bytes]
    max_lsn: int


@dataclass
class RecoveryReport:
    removed_invalid: List[str] = field(default_factory=list)
    removed_covered: List[str] = field(default_factory=list)
    replayed: int = 0


class PartitionEngine:
    """Single-writer LSM tree over one partition directory."""

    def __init__(self, directory, options: EngineOptions):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.options = options
        self.counters = EngineCounters()
        self.policy = PrefixMergePolicy(options.merge_max_bytes, options.merge_tolerable_count)
        self._lock = threading.RLock()
        # held by flush, merge and bulk load for their whole write; never taken while holding _lock
        self._io_lock = threading.RLock()
        self._memtable: Dict[bytes, MemEntry] = {}
        self._sorted_keys: List[bytes] = []
        self._mem_bytes = 0
        self._sealed: Optional[_Sealed] = None
        self._retired: List[DiskComponent] = []
        self.components: List[DiskComponent] = []
        self.schema = SchemaStore()
        self.pk_set = set()
        self.flush_seq = 0
        self.recovery = RecoveryReport()
        self._recover()

    # ------------------------------------------------------------------
    # Recovery
    # ------------------------------------------------------------------

    def _recover(self) -> None:
        for stray in self.directory.glob("*.tmp"):
            stray.unlink()
        valid: List[DiskComponent] = []
        for path in sorted(self.directory.glob("c_*.dat")):
            if ComponentId.parse(path.name) is None:
                continue
            try:
                comp = DiskComponent(path, self.options.page_size, self.options.laf_page_size,
                                     self.options.laf_cache_pages)
            except Exception as e:
                logger.warning("Removing unreadable component %s: %s", path.name, e)
                remove_component_files(path)
                self.recovery.removed_invalid.append(path.name)
                continue
            if not comp.valid:
                logger.warning("Removing invalid component %s", path.name)
                comp.close()
                remove_component_files(path)
                self.recovery.removed_invalid.append(path.name)
                continue
            try:
                comp.load_meta()
            except ComponentCorruptError as e:
                logger.error("Recovery failed: %s", e)
                comp.close()
                raise
            valid.append(comp)
        for laf in self.directory.glob(f"*{LAF_SUFFIX}"):
            if not laf.with_name(laf.name[:-len(LAF_SUFFIX)]).exists():
                laf.unlink()

        valid.sort(key=lambda c: c.cid)
        kept = []
        for comp in valid:
            if any(other.cid.covers(comp.cid) for other in valid):
                logger.info("Removing component %s covered by a merged component", comp.cid)
                comp.close()
                remove_component_files(comp.path)
                self.recovery.removed_covered.append(comp.path.name)
            else:
                kept.append(comp)
        self.components = kept
        self.flush_seq = max((c.cid.hi for c in kept), default=0)

        for comp in reversed(kept):
            if comp.schema is not None:
                self.schema = comp.schema.copy()
                break

        for comp in kept:
            for key, kind, _ in comp.iter_entries():
                if kind == ENTRY_RECORD:
                    self.pk_set.add(key)
                else:
                    self.pk_set.discard(key)

        persisted_lsn = max((c.load_meta().max_lsn for c in kept), default=0)
        self.wal = WriteAheadLog(self.directory / WAL_FILE, fsync=self.options.wal_fsync)
        self.wal.advance_to(persisted_lsn)
        for record in self.wal.replay():
            if record.lsn <= persisted_lsn:
                continue
            self._replay(record)
            self.recovery.replayed += 1
        logger.info(
            "Recovered partition %s: %d components, %d live keys, %d WAL records replayed",
            self.directory.name, len(kept), len(self.pk_set), self.recovery.replayed,
        )

    def _replay(self, record: WalRecord) -> None:
        logger.debug("Replaying lsn %d (%s)", record.lsn, record.op.name)
        if record.op == WalOp.DELETE:
            self._apply_delete(record.key, record.lsn)
        else:
            self._apply_put(record.key, encode(record.doc, self.options.declared), record.lsn)
        self._maybe_flush()

    # ------------------------------------------------------------------
    # Writes
    # ------------------------------------------------------------------

    def _probe(self, key: bytes) -> bool:
        self.counters.pk_probes += 1
        return key in self.pk_set

    def _disk_version(self, key: bytes) -> Optional[Tuple[VBRecord, DiskComponent]]:
        self.counters.primary_lookups += 1
        for comp in reversed(self.components):
            found = comp.get(key)
            if found is not None:
                kind, rec = found
                return (rec, comp) if kind == ENTRY_RECORD else None
        return None

    def _anti_for(self, key: bytes) -> Optional[SchemaNode]:
        """Anti-schema of the newest on-disk version that a new entry supersedes."""
        existing = self._memtable.get(key)
        if existing is not None:
            return existing.anti
        if not self._probe(key):
            return None
        sealed = self._sealed.memtable.get(key) if self._sealed is not None else None
        if sealed is not None:
            # the sealed version is already inferred into self.schema
            if sealed.record is None or not self.options.compactor:
                return None
            return extract_anti_schema(sealed.record, self.schema)
        found = self._disk_version(key)
        if found is None or not self.options.compactor:
            return None
        rec, _ = found
        return extract_anti_schema(rec, self.schema)

    def _put_entry(self, key: bytes, entry: MemEntry) -> None:
        old = self._memtable.get(key)
        if old is None:
            bisect.insort(self._sorted_keys, key)
        else:
            self._mem_bytes -= old.size + len(key)
        self._memtable[key] = entry
        self._mem_bytes += entry.size + len(key)

    def _apply_put(self, key: bytes, rec: VBRecord, lsn: int) -> None:
        self._put_entry(key, MemEntry(rec, self._anti_for(key), lsn))
        self.pk_set.add(key)

    def _apply_delete(self, key: bytes, lsn: int) -> None:
        self._put_entry(key, MemEntry(None, self._anti_for(key), lsn))
        self.pk_set.discard(key)

    def _prepare(self, doc: Any) -> Tuple[bytes, VBRecord]:
        key = encode_key(extract_key(doc, self.options.primary_key))
        return key, encode(doc, self.options.declared)

    def insert(self, doc: Any, strict: bool = True) -> int:
        """
        Insert a document.

        Args:
            doc (Any): Document carrying the primary key.
            strict (bool): Reject live keys; otherwise behave as upsert.

        Returns:
            int: Lsn of the acknowledged operation.
        """
        key, rec = self._prepare(doc)
        with self._lock:
            if strict and self._probe(key):
                raise DuplicateKeyError(f"key {extract_key(doc, self.options.primary_key)!r} already exists")
            wal_record = self.wal.append(WalOp.INSERT if strict else WalOp.UPSERT, key, doc)
            self._apply_put(key, rec, wal_record.lsn)
        self._maybe_flush()
        return wal_record.lsn

    def upsert(self, doc: Any) -> int:
        """Insert or replace; a key the pk set has never seen costs no primary lookup."""
        return self.insert(doc, strict=False)

    def delete(self, key: Any) -> int:
        """Delete by primary key; deleting an absent key leaves only a tombstone."""
        key_bytes = encode_key(key)
        with self._lock:
            wal_record = self.wal.append(WalOp.DELETE, key_bytes)
            self._apply_delete(key_bytes, wal_record.lsn)
        self._maybe_flush()
        return wal_record.lsn

    # ------------------------------------------------------------------
    # Flush and merge
    # ------------------------------------------------------------------

    def _maybe_flush(self) -> None:
        """Flush when over budget, unless a flush or merge is already writing."""
        if self._mem_bytes < self.options.memtable_bytes:
            return
        if not self._io_lock.acquire(blocking=False):
            return
        try:
            self.flush()
        finally:
            self._io_lock.release()

    def _seal(self) -> _Sealed:
        """Swap the memtable out and compute the component it becomes. Caller holds ``_lock``."""
        snapshot, keys = self._memtable, self._sorted_keys
        self._memtable, self._sorted_keys, self._mem_bytes = {}, [], 0
        max_lsn = max(entry.lsn for entry in snapshot.values())
        schema = self.schema.copy() if self.options.compactor else None
        entries = []
        for key in keys:
            entry = snapshot[key]
            if schema is not None and entry.anti is not None:
                apply_anti_schema(entry.anti, schema)
            if entry.record is None:
                entries.append((key, ENTRY_TOMBSTONE, None))
                continue
            rec = entry.record
            if schema is not None:
                infer_schema(rec, schema)
                rec = compact(rec, schema)
            entries.append((key, ENTRY_RECORD, rec))
        if schema is not None:
            self.schema = schema
        cid = ComponentId(self.flush_seq + 1, self.flush_seq + 1)
        self.flush_seq = cid.hi
        blob = serialize_schema(schema) if schema is not None else None
        return _Sealed(snapshot, keys, cid, entries, blob, max_lsn)

    def flush(self) -> Optional[ComponentId]:
        """
        Write the in-memory component to a new disk component.

        The memtable is swapped out under the writer lock; the component is
        written without it, so writes and lookups continue meanwhile. A sealed
        memtable whose write failed is retried by the next flush.

        Returns:
            Optional[ComponentId]: The new component, or None when nothing was buffered.
        """
        with self._io_lock:
            with self._lock:
                retry = self._sealed is not None
                if not retry:
                    if not self._memtable:
                        return None
                    self._sealed = self._seal()
                sealed = self._sealed
            try:
                path = write_component(
                    self.directory, sealed.cid, sealed.entries, sealed.schema_blob,
                    sealed.max_lsn, self.options.codec, self.options.page_size,
                    stage="flush", fsync=self.options.wal_fsync,
                )
                comp = self._open_component(path)
            except VBStoreError:
                raise
            except Exception as e:
                logger.error("Flush of %s failed: %s", sealed.cid, e)
                raise
            with self._lock:
                self.components.append(comp)
                self._sealed = None
                self.wal.truncate_through(sealed.max_lsn)
                self.counters.flushes += 1
            logger.info(
                "Flushed %d entries of partition %s into %s", len(sealed.entries), self.directory.name, sealed.cid,
            )
            if self.options.auto_merge:
                self.maybe_merge()
            if retry:
                return self.flush() or sealed.cid
            return sealed.cid

    def bulk_load(self, docs: List[Any]) -> Optional[ComponentId]:
        """
        Build a single component from a batch, bypassing the WAL.

        The whole batch is inferred before any record is compacted, so the
        component carries one schema for all of its records.

        Args:
            docs (List[Any]): Documents with distinct primary keys.

        Returns:
            Optional[ComponentId]: The new component, or None for an empty batch.
        """
        with self._io_lock, self._lock:
            if self.components or self._memtable or self._sealed is not None:
                raise VBStoreError("bulk load needs an empty partition")
            if not docs:
                return None
            prepared = sorted((self._prepare(doc) for doc in docs), key=lambda item: item[0])
            for (a, _), (b, _) in zip(prepared, prepared[1:]):
                if a == b:
                    raise DuplicateKeyError(f"duplicate key in bulk load input: {a!r}")
            schema = SchemaStore() if self.options.compactor else None
            if schema is not None:
                for _, rec in prepared:
                    infer_schema(rec, schema)
            entries = [
                (key, ENTRY_RECORD, compact(rec, schema) if schema is not None else rec)
                for key, rec in prepared
            ]
            cid = ComponentId(self.flush_seq + 1, self.flush_seq + 1)
            path = write_component(
                self.directory, cid, entries,
                serialize_schema(schema) if schema is not None else None,
                self.wal.last_lsn, self.options.codec, self.options.page_size,
                stage="flush", fsync=self.options.wal_fsync,
            )
            self.components.append(self._open_component(path))
            self.flush_seq = cid.hi
            if schema is not None:
                self.schema = schema
            self.pk_set.update(key for key, _ in prepared)
            logger.info("Bulk loaded %d records into %s of partition %s", len(entries), cid, self.directory.name)
            return cid

    def _open_component(self, path: Path) -> DiskComponent:
        comp = DiskComponent(path, self.options.page_size, self.options.laf_page_size, self.options.laf_cache_pages)
        comp.load_meta()
        return comp

    def maybe_merge(self) -> List[ComponentId]:
        """Run the merge policy until it stops asking."""
        merged = []
        with self._io_lock:
            while True:
                request = self.merge_policy_tick()
                if request is None:
                    return merged
                merged.append(self.merge(request))

    def merge_policy_tick(self) -> Optional[List[ComponentId]]:
        with self._lock:
            sizes = [ComponentSize(c.cid, c.size_bytes) for c in self.components]
        return self.policy.tick(sizes)

    def merge(self, cids: List[ComponentId]) -> ComponentId:
        """
        Merge adjacent components into one.

        Inputs are read and the output written without the writer lock; the
        merged component replaces its inputs in one short critical section.

        Args:
            cids (List[ComponentId]): Adjacent live components, oldest first.

        Returns:
            ComponentId: Id of the merged component.
        """
        with self._io_lock:
            with self._lock:
                positions = [i for i, c in enumerate(self.components) if c.cid in cids]
                if len(positions) != len(cids) or len(cids) < 2 or positions != list(range(positions[0], positions[0] + len(cids))):
                    raise ValueError(f"merge inputs {[str(c) for c in cids]} are not adjacent live components")
                inputs = [self.components[i] for i in positions]
                includes_oldest = positions[0] == 0
            newest = inputs[-1].load_meta()
            cid = ComponentId(min(c.cid.lo for c in inputs), max(c.cid.hi for c in inputs))
            max_lsn = max(c.load_meta().max_lsn for c in inputs)

            path = write_component(
                self.directory, cid, _newest_wins(inputs, drop_tombstones=includes_oldest),
                newest.schema, max_lsn, self.options.codec, self.options.page_size,
                stage="merge", fsync=self.options.wal_fsync,
            )
            merged = self._open_component(path)
            with self._lock:
                # flushes and merges hold the io lock, so the run is still in place
                start = self.components.index(inputs[0])
                self.components[start:start + len(inputs)] = [merged]
                self._retired.extend(inputs)
                self.counters.merges += 1
            for comp in inputs:
                remove_component_files(comp.path)
            logger.info("Merged %s into %s (%d entries)", [str(c.cid) for c in inputs], cid, merged.meta.entry_count)
            return cid

    # ------------------------------------------------------------------
    # Reads
    # ------------------------------------------------------------------

    def point_lookup(self, key: Any) -> Optional[Any]:
        """Newest live version of ``key`` as a document, or None."""
        key_bytes = encode_key(key)
        with self._lock:
            entry = self._memtable.get(key_bytes)
            if entry is None and self._sealed is not None:
                entry = self._sealed.memtable.get(key_bytes)
            if entry is not None:
                return decode(entry.record, None, self.options.declared) if entry.record is not None else None
            components = list(self.components)
        for comp in reversed(components):
            found = comp.get(key_bytes)
            if found is not None:
                kind, rec = found
                if kind == ENTRY_TOMBSTONE:
                    return None
                return decode(rec, comp.schema, self.options.declared)
        return None

    def scan(self, lo: Optional[bytes] = None, hi: Optional[bytes] = None) -> Iterator[ScanItem]:
        """
        Live records in key order, each tagged with the component that stores it.

        Args:
            lo (Optional[bytes]): Inclusive lower bound on encoded keys.
            hi (Optional[bytes]): Exclusive upper bound on encoded keys.

        Returns:
            Iterator[ScanItem]: Newest live version per key.
        """
        with self._lock:
            buffers = [(list(self._sorted_keys), dict(self._memtable))]
            if self._sealed is not None:
                buffers.append((self._sealed.keys, self._sealed.memtable))
            components = list(self.components)

        def mem_source(rank: int, keys: List[bytes], memtable: Dict[bytes, MemEntry]):
            start = bisect.bisect_left(keys, lo) if lo is not None else 0
            for key in keys[start:]:
                if hi is not None and key >= hi:
                    return
                entry = memtable[key]
                kind = ENTRY_RECORD if entry.record is not None else ENTRY_TOMBSTONE
                yield key, rank, kind, entry.record, None

        def disk_source(rank: int, comp: DiskComponent):
            schema = comp.schema
            for key, kind, rec in comp.iter_entries():
                if lo is not None and key < lo:
                    continue
                if hi is not None and key >= hi:
                    return
                yield key, rank, kind, rec, (comp.cid, schema)

        sources = [mem_source(rank, keys, table) for rank, (keys, table) in enumerate(buffers)]
        for rank, comp in enumerate(reversed(components), start=len(buffers)):
            sources.append(disk_source(rank, comp))
        previous = None
        for key, _, kind, rec, origin in heapq.merge(*sources, key=lambda item: (item[0], item[1])):
            if key == previous:
                continue
            previous = key
            if kind == ENTRY_TOMBSTONE:
                continue
            if origin is None:
                yield ScanItem(key, rec, None, None)
            else:
                yield ScanItem(key, rec, origin[0], origin[1])

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def schema_snapshot(self) -> Dict[ComponentId, Optional[SchemaStore]]:
        """Schema of every live component, as broadcast at query start."""
        with self._lock:
            return {comp.cid: comp.schema for comp in self.components}

    def live_count(self) -> int:
        return len(self.pk_set)

    def disk_bytes(self) -> int:
        return sum(c.size_bytes for c in self.components)

    def close(self) -> None:
        with self._io_lock, self._lock:
            self.wal.close()
            for comp in self.components + self._retired:
                comp.close()
            self._retired = []


def _newest_wins(inputs: List[DiskComponent], drop_tombstones: bool):
    """k-way merge of component entries; the newest input wins each key."""
    sources = []
    for rank, comp in enumerate(reversed(inputs)):
        sources.append(((key, rank, kind, rec) for key, kind, rec in comp.iter_entries()))
    previous = None
    for key, _, kind, rec in heapq.merge(*sources, key=lambda item: (item[0], item[1])):
        if key == previous:
            continue
        previous = key
        if kind == ENTRY_TOMBSTONE and drop_tombstones:
            continue
        yield key, kind, rec
