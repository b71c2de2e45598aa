"""
Vector-based physical record format.

A record is a fixed 26-byte header followed by four vectors:

    tags | fixed-length values | var lengths + var values | field-name entries + field names

Tags encode the document tree depth-first. Field-name entries are bit-packed
``flag | payload`` slots, one per value whose parent is an object: the flag marks a
declared root field (payload = declared index); otherwise the payload is the name
length (uncompacted) or the FieldNameID (compacted, field-name strings removed and
``offset_fieldnames`` set to zero).
"""
import logging
import math
import struct
import threading
from dataclasses import dataclass
from typing import Any, Iterator, List, Optional, Sequence, Tuple

from src.core.exceptions import RecordEncodeError, RecordFormatError, SchemaError
from src.core.types import (
    FIXED_WIDTHS,
    INT64_MAX,
    INT64_MIN,
    MISSING,
    DeclaredKeySpec,
    TypeTag,
)
from src.utils.binary import MAX_BIT_WIDTH, bit_width, pack_bits, packed_size, unpack_bits
from src.utils.paths import Field, Index, PathExpr, Wildcard, navigate

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<IIIIIIBB")
HEADER_SIZE = HEADER.size

MAX_STRING_BYTES = (1 << MAX_BIT_WIDTH) - 2
MAX_FIELD_NAME_BYTES = (1 << (MAX_BIT_WIDTH - 1)) - 2

_INT64 = struct.Struct("<q")
_DOUBLE = struct.Struct("<d")

_OBJECT = int(TypeTag.OBJECT)
_ARRAY = int(TypeTag.ARRAY)
_STRING = int(TypeTag.STRING)
_INT = int(TypeTag.INT64)
_DBL = int(TypeTag.DOUBLE)
_BOOL = int(TypeTag.BOOLEAN)
_NULL = int(TypeTag.NULL)
_CLOSE = int(TypeTag.CLOSE_NEST)
_EOV = int(TypeTag.EOV)


class ScanProbe:
    """Counts walks over record tag vectors."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def hit(self) -> None:
        with self._lock:
            self._count += 1

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> int:
        with self._lock:
            previous, self._count = self._count, 0
        return previous


scan_probe = ScanProbe()


@dataclass(frozen=True)
class RecordHeader:
    total_length: int
    tag_count: int
    offset_tags: int
    offset_fixed: int
    offset_var: int
    offset_fieldnames: int
    var_len_bits: int
    fieldname_len_bits: int


class VBRecord:
    """Immutable byte image of one record."""

    __slots__ = ("data", "header")

    def __init__(self, data: bytes):
        data = bytes(data)
        if len(data) < HEADER_SIZE:
            raise RecordFormatError(f"record shorter than its {HEADER_SIZE}-byte header")
        self.data = data
        self.header = RecordHeader(*HEADER.unpack_from(data))

    @property
    def compacted(self) -> bool:
        return self.header.offset_fieldnames == 0

    @property
    def total_length(self) -> int:
        return self.header.total_length

    @property
    def tags(self) -> bytes:
        h = self.header
        return self.data[h.offset_tags:h.offset_tags + h.tag_count]

    def __len__(self) -> int:
        return len(self.data)

    def __eq__(self, other) -> bool:
        return isinstance(other, VBRecord) and self.data == other.data

    def __hash__(self) -> int:
        return hash(self.data)

    def __repr__(self) -> str:
        state = "compacted" if self.compacted else "uncompacted"
        return f"<VBRecord {self.header.total_length}B {self.header.tag_count} tags {state}>"


@dataclass(frozen=True)
class FieldRef:
    """Field-name entry of one object child."""

    declared: bool
    payload: int
    name: Optional[str]


@dataclass
class _Layout:
    tags: bytes
    var_lengths: List[int]
    var_values_start: int
    fn_start: int
    fn_end: int
    fn_values_start: int


def _layout(rec: VBRecord) -> _Layout:
    h = rec.header
    data = rec.data
    if h.total_length != len(data):
        raise RecordFormatError(f"header length {h.total_length} != record size {len(data)}")
    if not (h.offset_tags + h.tag_count == h.offset_fixed <= h.offset_var <= h.total_length):
        raise RecordFormatError("record offsets out of order")
    tags = data[h.offset_tags:h.offset_fixed]
    n_strings = tags.count(_STRING)
    lengths_size = packed_size(n_strings, h.var_len_bits)
    var_lengths = unpack_bits(data[h.offset_var:h.offset_var + lengths_size], n_strings, h.var_len_bits)
    var_start = h.offset_var + lengths_size
    fn_start = var_start + sum(var_lengths)
    fn_end = h.total_length if h.offset_fieldnames == 0 else h.offset_fieldnames
    if not fn_start <= fn_end <= h.total_length:
        raise RecordFormatError("variable-length values overrun the field-name section")
    return _Layout(tags, var_lengths, var_start, fn_start, fn_end, fn_end)


class _Cursor:
    """Sequential reader over the value and field-name vectors of one record."""

    def __init__(self, rec: VBRecord, schema=None, declared: DeclaredKeySpec = DeclaredKeySpec()):
        self.rec = rec
        self.data = rec.data
        self.layout = _layout(rec)
        self.tags = self.layout.tags
        self.schema = schema
        self.declared = declared
        self.compacted = rec.compacted
        self.fixed_pos = rec.header.offset_fixed
        self.var_idx = 0
        self.var_pos = self.layout.var_values_start
        self.name_pos = self.layout.fn_values_start
        width = rec.header.fieldname_len_bits
        self.fn_width = width
        if width:
            capacity = ((self.layout.fn_end - self.layout.fn_start) * 8) // width
            self.fn_entries = unpack_bits(self.data[self.layout.fn_start:self.layout.fn_end], capacity, width)
        else:
            self.fn_entries = []
        self.fn_idx = 0

    def read_scalar(self, tag: int) -> Any:
        data = self.data
        if tag == _INT:
            value = _INT64.unpack_from(data, self.fixed_pos)[0]
            self.fixed_pos += 8
            return value
        if tag == _DBL:
            value = _DOUBLE.unpack_from(data, self.fixed_pos)[0]
            self.fixed_pos += 8
            return value
        if tag == _BOOL:
            byte = data[self.fixed_pos]
            self.fixed_pos += 1
            if byte > 1:
                raise RecordFormatError(f"boolean byte {byte} at {self.fixed_pos - 1}")
            return bool(byte)
        if tag == _NULL:
            return None
        if tag == _STRING:
            length = self.var_lengths_at(self.var_idx)
            raw = data[self.var_pos:self.var_pos + length]
            self.var_idx += 1
            self.var_pos += length
            return raw.decode("utf-8")
        raise RecordFormatError(f"tag {tag} is not a scalar")

    def skip_scalar(self, tag: int) -> None:
        if tag == _STRING:
            self.var_pos += self.var_lengths_at(self.var_idx)
            self.var_idx += 1
        elif tag in FIXED_WIDTHS:
            self.fixed_pos += FIXED_WIDTHS[tag]
        else:
            raise RecordFormatError(f"tag {tag} is not a scalar")

    def var_lengths_at(self, i: int) -> int:
        return self.layout.var_lengths[i]

    def next_field(self, resolve_names: bool = True) -> FieldRef:
        if self.fn_idx >= len(self.fn_entries):
            raise RecordFormatError("field-name entries exhausted")
        entry = self.fn_entries[self.fn_idx]
        self.fn_idx += 1
        flag_shift = self.fn_width - 1
        declared = bool(entry >> flag_shift)
        payload = entry & ((1 << flag_shift) - 1)
        if declared:
            name = self.declared.name_at(payload) if resolve_names else None
            return FieldRef(True, payload, name)
        if not self.compacted:
            raw = self.data[self.name_pos:self.name_pos + payload]
            if len(raw) != payload:
                raise RecordFormatError("field-name values truncated")
            self.name_pos += payload
            return FieldRef(False, payload, raw.decode("utf-8"))
        if not resolve_names:
            return FieldRef(False, payload, None)
        if self.schema is None:
            raise RecordFormatError("compacted record requires a schema to resolve field names")
        return FieldRef(False, payload, self.schema.name_of(payload))


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, declared: DeclaredKeySpec):
        self.declared = declared.as_mapping()
        self.tags = bytearray()
        self.fixed = bytearray()
        self.var_lengths: List[int] = []
        self.var_values = bytearray()
        self.entries: List[Tuple[int, int]] = []
        self.names = bytearray()

    def field(self, name: Any, value: Any, root: bool) -> None:
        if not isinstance(name, str):
            raise RecordEncodeError(f"field name must be a string, got {type(name).__name__}")
        index = self.declared.get(name) if root else None
        if index is not None:
            self.entries.append((1, index))
        else:
            raw = name.encode("utf-8")
            if len(raw) > MAX_FIELD_NAME_BYTES:
                raise RecordEncodeError(f"field name of {len(raw)} bytes exceeds {MAX_FIELD_NAME_BYTES}")
            self.entries.append((0, len(raw)))
            self.names += raw
        self.value(value)

    def fields(self, obj: dict, root: bool) -> None:
        seen = set()
        for name, child in obj.items():
            if name in seen:
                raise RecordEncodeError(f"duplicate field name {name!r}")
            seen.add(name)
            self.field(name, child, root)

    def value(self, value: Any) -> None:
        if value is None:
            self.tags.append(_NULL)
        elif isinstance(value, bool):
            self.tags.append(_BOOL)
            self.fixed.append(1 if value else 0)
        elif isinstance(value, int):
            if not INT64_MIN <= value <= INT64_MAX:
                raise RecordEncodeError(f"integer {value} does not fit in 64 bits")
            self.tags.append(_INT)
            self.fixed += _INT64.pack(value)
        elif isinstance(value, float):
            if not math.isfinite(value):
                raise RecordEncodeError(f"{value} is not a JSON number")
            self.tags.append(_DBL)
            self.fixed += _DOUBLE.pack(value)
        elif isinstance(value, str):
            raw = value.encode("utf-8")
            if len(raw) > MAX_STRING_BYTES:
                raise RecordEncodeError(f"string of {len(raw)} bytes exceeds {MAX_STRING_BYTES}")
            self.tags.append(_STRING)
            self.var_lengths.append(len(raw))
            self.var_values += raw
        elif isinstance(value, dict):
            self.tags.append(_OBJECT)
            self.fields(value, root=False)
            self.tags.append(_CLOSE)
        elif isinstance(value, (list, tuple)):
            self.tags.append(_ARRAY)
            for item in value:
                self.value(item)
            self.tags.append(_CLOSE)
        else:
            raise RecordEncodeError(f"unsupported scalar kind {type(value).__name__}")


def assemble(
    tags: bytes,
    fixed: bytes,
    var_lengths: Sequence[int],
    var_values: bytes,
    entries: Sequence[Tuple[int, int]],
    names: bytes,
    compacted: bool,
) -> VBRecord:
    """Lay out the vectors behind a header with minimal bit widths."""
    var_bits = bit_width(max(var_lengths)) if var_lengths else 0
    fn_bits = bit_width(max(p for _, p in entries)) + 1 if entries else 0
    if var_bits > MAX_BIT_WIDTH or fn_bits > MAX_BIT_WIDTH:
        raise RecordEncodeError(f"bit width exceeds {MAX_BIT_WIDTH} bits")
    var_packed = pack_bits(var_lengths, var_bits)
    fn_packed = pack_bits([(flag << (fn_bits - 1)) | payload for flag, payload in entries], fn_bits)

    offset_tags = HEADER_SIZE
    offset_fixed = offset_tags + len(tags)
    offset_var = offset_fixed + len(fixed)
    fn_start = offset_var + len(var_packed) + len(var_values)
    fn_values_at = fn_start + len(fn_packed)
    total = fn_values_at if compacted else fn_values_at + len(names)

    header = HEADER.pack(
        total, len(tags), offset_tags, offset_fixed, offset_var,
        0 if compacted else fn_values_at, var_bits, fn_bits,
    )
    body = b"".join((header, bytes(tags), bytes(fixed), var_packed, bytes(var_values), fn_packed))
    if not compacted:
        body += bytes(names)
    return VBRecord(body)


def encode(doc: Any, declared: DeclaredKeySpec = DeclaredKeySpec()) -> VBRecord:
    """
    Encode a JSON document into an uncompacted vector-based record.

    Args:
        doc (Any): Document whose root must be an object.
        declared (DeclaredKeySpec): Root fields stored by declared index.

    Returns:
        VBRecord: The uncompacted record.

    Raises:
        RecordEncodeError: On a non-object root, a repeated field name within one
            object, a non-string field name, a non-finite number or an oversized value.
    """
    if not isinstance(doc, dict):
        raise RecordEncodeError("record root must be an object")
    builder = _Builder(declared)
    builder.tags.append(_OBJECT)
    builder.fields(doc, root=True)
    builder.tags.append(_EOV)
    return assemble(
        builder.tags, builder.fixed, builder.var_lengths, builder.var_values,
        builder.entries, builder.names, compacted=False,
    )


# ---------------------------------------------------------------------------
# Single-pass walk shared by decode and get_values
# ---------------------------------------------------------------------------


class _TrieNode:
    __slots__ = ("fields", "indexes", "wildcard", "terminal")

    def __init__(self):
        self.fields = {}
        self.indexes = {}
        self.wildcard = None
        self.terminal = False


def _build_trie(paths: Sequence[PathExpr]) -> _TrieNode:
    root = _TrieNode()
    for path in paths:
        node = root
        for step in path.steps:
            if isinstance(step, Field):
                node = node.fields.setdefault(step.name, _TrieNode())
            elif isinstance(step, Index):
                node = node.indexes.setdefault(step.i, _TrieNode())
            else:
                if node.wildcard is None:
                    node.wildcard = _TrieNode()
                node = node.wildcard
        node.terminal = True
    return root


_PRUNED = object()
_SKIP, _PARTIAL, _FULL = 0, 1, 2


def _match(nodes, kind: int, key) -> tuple:
    matched = []
    for node in nodes:
        if kind == _OBJECT:
            child = node.fields.get(key)
            if child is not None:
                matched.append(child)
        else:
            child = node.indexes.get(key)
            if child is not None:
                matched.append(child)
            if node.wildcard is not None:
                matched.append(node.wildcard)
    return tuple(matched)


def _attach(container, kind: int, key, value) -> None:
    if kind == _OBJECT:
        if value is not _PRUNED:
            container[key] = value
    else:
        container.append(value)


def _walk(rec: VBRecord, schema, declared: DeclaredKeySpec, trie: Optional[_TrieNode]) -> Any:
    scan_probe.hit()
    if rec.compacted and schema is None:
        raise RecordFormatError("compacted record requires a schema")
    try:
        cur = _Cursor(rec, schema, declared)
        tags = cur.tags
        if not tags or tags[0] not in (_OBJECT, _ARRAY):
            raise RecordFormatError("tag vector must start with OBJECT or ARRAY")
        root = {} if tags[0] == _OBJECT else []
        root_nodes = (trie,) if trie is not None else ()
        # frame = [kind, container, trie nodes, full, next array index]
        stack = [[tags[0], root, root_nodes, trie is None, 0]]
        n = len(tags)
        i = 1
        while i < n:
            tag = tags[i]
            i += 1
            if tag == _EOV:
                if len(stack) != 1:
                    raise RecordFormatError(f"EOV at tag {i - 1} inside a nested value")
                if i != n:
                    raise RecordFormatError("tags follow EOV")
                return root
            if tag == _CLOSE:
                if len(stack) == 1:
                    raise RecordFormatError(f"CLOSE_NEST at tag {i - 1} closes the root")
                stack.pop()
                continue
            frame = stack[-1]
            kind, container, nodes, full = frame[0], frame[1], frame[2], frame[3]
            if kind == _OBJECT:
                key = cur.next_field().name
            else:
                key = frame[4]
                frame[4] += 1

            if full:
                mode, child_nodes = _FULL, ()
            elif nodes:
                child_nodes = _match(nodes, kind, key)
                if any(node.terminal for node in child_nodes):
                    mode = _FULL
                elif child_nodes:
                    mode = _PARTIAL
                else:
                    mode = _SKIP
            else:
                mode, child_nodes = _SKIP, ()

            if tag == _OBJECT or tag == _ARRAY:
                child = ({} if tag == _OBJECT else []) if mode != _SKIP else None
                if container is not None:
                    _attach(container, kind, key, _PRUNED if child is None else child)
                stack.append([tag, child, child_nodes, mode == _FULL, 0])
            elif tag in FIXED_WIDTHS or tag == _STRING:
                if mode == _SKIP:
                    cur.skip_scalar(tag)
                    if container is not None:
                        _attach(container, kind, key, _PRUNED)
                else:
                    value = cur.read_scalar(tag)
                    if container is not None:
                        _attach(container, kind, key, value)
            else:
                raise RecordFormatError(f"unknown tag {tag} at tag index {i - 1}")
        raise RecordFormatError("tag vector has no EOV")
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as e:
        raise RecordFormatError(f"malformed record: {e}") from e
    except KeyError as e:
        raise SchemaError(f"FieldNameID {e} not present in the dictionary") from e


def decode(rec: VBRecord, schema=None, declared: DeclaredKeySpec = DeclaredKeySpec()) -> Any:
    """
    Decode a record back into its JSON document.

    Args:
        rec (VBRecord): Record to decode.
        schema: Schema store resolving FieldNameIDs; required for compacted records.
        declared (DeclaredKeySpec): Names of declared root fields.

    Returns:
        Any: The logical document.
    """
    return _walk(rec, schema, declared, None)


def get_values(
    rec: VBRecord,
    schema,
    declared: DeclaredKeySpec,
    paths: Sequence[PathExpr],
) -> List[Any]:
    """
    Resolve several path expressions in one linear scan of the tag vector.

    Args:
        rec (VBRecord): Record to read.
        schema: Schema store for compacted records (may be None otherwise).
        declared (DeclaredKeySpec): Names of declared root fields.
        paths (Sequence[PathExpr]): Paths to extract.

    Returns:
        List[Any]: One value per path; MISSING where a prefix is absent.
    """
    if not paths:
        return []
    pruned = _walk(rec, schema, declared, _build_trie(paths))
    results = []
    for path in paths:
        value = navigate(pruned, path.steps)
        results.append(MISSING if value is _PRUNED else value)
    return results


# ---------------------------------------------------------------------------
# Event stream used by schema inference and compaction
# ---------------------------------------------------------------------------


def iter_events(
    rec: VBRecord,
    schema=None,
    declared: DeclaredKeySpec = DeclaredKeySpec(),
    resolve_names: bool = True,
) -> Iterator[Tuple[int, Optional[FieldRef]]]:
    """
    Yield ``(tag, field)`` for every tag; ``field`` is set for object children.

    Scalar values are skipped, not decoded. Compacted records yield FieldRefs whose
    payload is the FieldNameID; names are resolved only when a schema is given.
    """
    scan_probe.hit()
    try:
        cur = _Cursor(rec, schema, declared)
        tags = cur.tags
        if not tags:
            raise RecordFormatError("empty tag vector")
        kinds = [tags[0]]
        yield tags[0], None
        for i in range(1, len(tags)):
            tag = tags[i]
            if tag == _EOV:
                yield tag, None
                return
            if tag == _CLOSE:
                if len(kinds) == 1:
                    raise RecordFormatError(f"CLOSE_NEST at tag {i} closes the root")
                kinds.pop()
                yield tag, None
                continue
            ref = None
            if kinds[-1] == _OBJECT:
                ref = cur.next_field(resolve_names=resolve_names and (schema is not None or not cur.compacted))
            if tag == _OBJECT or tag == _ARRAY:
                kinds.append(tag)
            else:
                cur.skip_scalar(tag)
            yield tag, ref
        raise RecordFormatError("tag vector has no EOV")
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as e:
        raise RecordFormatError(f"malformed record: {e}") from e


def compact(rec: VBRecord, schema) -> VBRecord:
    """
    Replace inline field names with FieldNameIDs from ``schema``'s dictionary.

    Args:
        rec (VBRecord): Uncompacted record already passed through inference.
        schema: Schema store whose dictionary holds every inferred name.

    Returns:
        VBRecord: Compacted record with byte-identical value vectors.
    """
    if rec.compacted:
        raise RecordFormatError("record is already compacted")
    entries = []
    for _, ref in iter_events(rec, resolve_names=False):
        if ref is None:
            continue
        if ref.declared:
            entries.append((1, ref.payload))
            continue
        fid = schema.lookup_name(ref.name)
        if fid is None:
            raise SchemaError(f"field name {ref.name!r} missing from the dictionary")
        entries.append((0, fid))
    layout = _layout(rec)
    h = rec.header
    data = rec.data
    return assemble(
        layout.tags,
        data[h.offset_fixed:h.offset_var],
        layout.var_lengths,
        data[layout.var_values_start:layout.fn_start],
        entries,
        b"",
        compacted=True,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    reason: str = ""
    byte_offset: Optional[int] = None
    tag_index: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


_OK = ValidationReport(True)


def _violation(reason: str, byte_offset: Optional[int] = None, tag_index: Optional[int] = None) -> ValidationReport:
    return ValidationReport(False, reason, byte_offset, tag_index)


def validate(rec, declared: Optional[DeclaredKeySpec] = None) -> ValidationReport:
    """
    Check every structural invariant of a record image.

    Args:
        rec: A VBRecord or raw bytes framed as one.
        declared (Optional[DeclaredKeySpec]): When given, declared indexes are range-checked.

    Returns:
        ValidationReport: ``ok`` or the first violation with its position.
    """
    data = rec.data if isinstance(rec, VBRecord) else bytes(rec)
    scan_probe.hit()
    try:
        return _validate(data, declared)
    except Exception as e:  # any crash is itself a violation
        return _violation(f"unreadable record: {e}")


def _validate(data: bytes, declared: Optional[DeclaredKeySpec]) -> ValidationReport:
    if len(data) < HEADER_SIZE:
        return _violation("shorter than header", 0)
    h = RecordHeader(*HEADER.unpack_from(data))
    if h.total_length != len(data):
        return _violation(f"total_length {h.total_length} != {len(data)}", 0)
    if h.offset_tags != HEADER_SIZE:
        return _violation("offset_tags does not follow the header", 8)
    if h.offset_tags + h.tag_count != h.offset_fixed:
        return _violation("offset_fixed does not follow the tag vector", 12)
    if not h.offset_fixed <= h.offset_var <= h.total_length:
        return _violation("offset_var out of range", 16)
    if h.var_len_bits > MAX_BIT_WIDTH or h.fieldname_len_bits > MAX_BIT_WIDTH:
        return _violation("bit width above 16", 24)
    compacted = h.offset_fieldnames == 0
    if not compacted and not h.offset_var <= h.offset_fieldnames <= h.total_length:
        return _violation("offset_fieldnames out of range", 20)

    tags = data[h.offset_tags:h.offset_fixed]
    if not tags:
        return _violation("empty tag vector", h.offset_tags, 0)
    if tags[0] not in (_OBJECT, _ARRAY):
        return _violation("first tag is not OBJECT or ARRAY", h.offset_tags, 0)

    kinds = [tags[0]]
    fixed_size = 0
    bool_offsets = []
    n_strings = 0
    child_depths = []
    eov_at = None
    for i in range(1, len(tags)):
        tag = tags[i]
        pos = h.offset_tags + i
        if tag > _EOV:
            return _violation(f"unknown tag {tag}", pos, i)
        if tag == _EOV:
            if len(kinds) != 1:
                return _violation("EOV inside a nested value", pos, i)
            eov_at = i
            break
        if tag == _CLOSE:
            if len(kinds) == 1:
                return _violation("CLOSE_NEST closes the root", pos, i)
            kinds.pop()
            continue
        if kinds[-1] == _OBJECT:
            child_depths.append(len(kinds))
        if tag in (_OBJECT, _ARRAY):
            kinds.append(tag)
        elif tag == _STRING:
            n_strings += 1
        else:
            if tag == _BOOL:
                bool_offsets.append(h.offset_fixed + fixed_size)
            fixed_size += FIXED_WIDTHS[tag]
    if eov_at is None:
        return _violation("tag vector has no EOV", h.offset_fixed, h.tag_count)
    if eov_at != len(tags) - 1:
        return _violation("tags follow EOV", h.offset_tags + eov_at + 1, eov_at + 1)

    if h.offset_var - h.offset_fixed != fixed_size:
        return _violation(f"fixed-length vector is {h.offset_var - h.offset_fixed} bytes, tags need {fixed_size}", h.offset_fixed)
    for offset in bool_offsets:
        if data[offset] > 1:
            return _violation("boolean byte is not 0 or 1", offset)

    lengths_size = packed_size(n_strings, h.var_len_bits)
    if n_strings and h.var_len_bits == 0:
        return _violation("strings present but var_len_bits is 0", 24)
    if not n_strings and h.var_len_bits:
        return _violation("var_len_bits set without strings", 24)
    if h.offset_var + lengths_size > h.total_length:
        return _violation("var lengths truncated", h.offset_var)
    lengths = unpack_bits(data[h.offset_var:h.offset_var + lengths_size], n_strings, h.var_len_bits)
    if lengths and bit_width(max(lengths)) != h.var_len_bits:
        return _violation("var_len_bits is not minimal", 24)
    var_start = h.offset_var + lengths_size
    fn_start = var_start + sum(lengths)
    fn_end = h.total_length if compacted else h.offset_fieldnames
    if fn_start > fn_end:
        return _violation("variable-length values overrun", var_start)
    pos = var_start
    for length in lengths:
        try:
            data[pos:pos + length].decode("utf-8")
        except UnicodeDecodeError:
            return _violation("string is not UTF-8", pos)
        pos += length

    n_fields = len(child_depths)
    width = h.fieldname_len_bits
    if n_fields == 0:
        if width:
            return _violation("fieldname_len_bits set without object children", 25)
        if fn_end != fn_start:
            return _violation("field-name section holds stray bytes", fn_start)
    else:
        if width < 2:
            return _violation("fieldname_len_bits too small", 25)
        if packed_size(n_fields, width) != fn_end - fn_start:
            return _violation("field-name entry count does not match object children", fn_start)
        entries = unpack_bits(data[fn_start:fn_end], n_fields, width)
        payload_mask = (1 << (width - 1)) - 1
        payloads = [e & payload_mask for e in entries]
        if bit_width(max(payloads)) + 1 != width:
            return _violation("fieldname_len_bits is not minimal", 25)
        name_bytes = 0
        for entry, payload, depth in zip(entries, payloads, child_depths):
            if entry >> (width - 1):
                if depth != 1:
                    return _violation("declared field below the root", fn_start)
                if declared is not None and payload >= len(declared.names):
                    return _violation(f"declared index {payload} out of range", fn_start)
            elif not compacted:
                name_bytes += payload
        if not compacted:
            if name_bytes != h.total_length - h.offset_fieldnames:
                return _violation("field-name values size mismatch", h.offset_fieldnames)
            pos = h.offset_fieldnames
            for entry, payload in zip(entries, payloads):
                if entry >> (width - 1):
                    continue
                try:
                    data[pos:pos + payload].decode("utf-8")
                except UnicodeDecodeError:
                    return _violation("field name is not UTF-8", pos)
                pos += payload
    return _OK
