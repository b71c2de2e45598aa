"""
Per-partition inferred schema.

The schema is a tree of typed nodes with occurrence counters. Object children are
keyed by FieldNameID; the dictionary mapping names to IDs is append-only. Deleted
and replaced records are removed from the schema by applying their anti-schema,
a tree of the same shape whose counters are the instance counts of the old record.
"""
import io
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Tuple

from src.core.exceptions import SchemaCorruptError, SchemaError
from src.core.types import TypeTag
from src.services.vb_record import FieldRef, VBRecord, iter_events
from src.utils.binary import read_varint, write_varint
from src.utils.paths import Field, PathExpr

logger = logging.getLogger(__name__)

SCHEMA_MAGIC = b"CSCH"
SCHEMA_FORMAT_VERSION = 1
_BLOB_HEADER = struct.Struct("<4sHQI")
_NAME_LEN = struct.Struct("<H")


class NodeKind(IntEnum):
    OBJECT = 0
    ARRAY = 1
    UNION = 2
    SCALAR = 3


_UNION_KEY = -1


@dataclass
class SchemaNode:
    kind: NodeKind
    counter: int = 0
    scalar: Optional[TypeTag] = None
    fields: Dict[int, "SchemaNode"] = field(default_factory=dict)
    item: Optional["SchemaNode"] = None
    branches: Dict[int, "SchemaNode"] = field(default_factory=dict)

    @property
    def value_kind(self) -> int:
        """The tag this node stands for; unions have no single tag."""
        if self.kind == NodeKind.OBJECT:
            return TypeTag.OBJECT
        if self.kind == NodeKind.ARRAY:
            return TypeTag.ARRAY
        if self.kind == NodeKind.SCALAR:
            return self.scalar
        return _UNION_KEY

    def children(self) -> List["SchemaNode"]:
        if self.kind == NodeKind.OBJECT:
            return list(self.fields.values())
        if self.kind == NodeKind.ARRAY:
            return [self.item] if self.item is not None else []
        if self.kind == NodeKind.UNION:
            return list(self.branches.values())
        return []

    def node_count(self) -> int:
        return 1 + sum(child.node_count() for child in self.children())


def _new_node(tag: int) -> SchemaNode:
    if tag == TypeTag.OBJECT:
        return SchemaNode(NodeKind.OBJECT)
    if tag == TypeTag.ARRAY:
        return SchemaNode(NodeKind.ARRAY)
    return SchemaNode(NodeKind.SCALAR, scalar=TypeTag(tag))


class FieldNameDictionary:
    """Bidirectional name/FieldNameID map; IDs are dense and never reused."""

    def __init__(self, names: Optional[List[str]] = None):
        self._names: List[str] = []
        self._ids: Dict[str, int] = {}
        for name in names or ():
            self.get_or_add(name)

    def get_or_add(self, name: str) -> int:
        fid = self._ids.get(name)
        if fid is None:
            fid = len(self._names)
            self._names.append(name)
            self._ids[name] = fid
        return fid

    def lookup(self, name: str) -> Optional[int]:
        return self._ids.get(name)

    def name_of(self, fid: int) -> str:
        if not 0 <= fid < len(self._names):
            raise KeyError(fid)
        return self._names[fid]

    @property
    def names(self) -> List[str]:
        return list(self._names)

    def byte_size(self) -> int:
        return sum(len(name.encode("utf-8")) for name in self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, FieldNameDictionary) and self._names == other._names


@dataclass
class SchemaSummary:
    node_count: int
    dictionary_entries: int
    dictionary_bytes: int
    version: int


class SchemaStore:
    """Inferred schema of one partition: node tree, dictionary and version."""

    def __init__(
        self,
        root: Optional[SchemaNode] = None,
        dictionary: Optional[FieldNameDictionary] = None,
        version: int = 0,
    ):
        self.root = root if root is not None else SchemaNode(NodeKind.OBJECT)
        self.dictionary = dictionary if dictionary is not None else FieldNameDictionary()
        self.version = version

    # name resolution used by the record codec
    def name_of(self, fid: int) -> str:
        return self.dictionary.name_of(fid)

    def lookup_name(self, name: str) -> Optional[int]:
        return self.dictionary.lookup(name)

    def copy(self) -> "SchemaStore":
        return deserialize_schema(serialize_schema(self))

    def structure(self) -> Dict[str, Any]:
        """Name-keyed rendering of the tree, independent of FieldNameID order."""
        return _render(self.root, self.dictionary)

    def summary(self) -> SchemaSummary:
        return SchemaSummary(
            node_count=self.root.node_count(),
            dictionary_entries=len(self.dictionary),
            dictionary_bytes=self.dictionary.byte_size(),
            version=self.version,
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SchemaStore)
            and self.version == other.version
            and self.dictionary == other.dictionary
            and self.root == other.root
        )

    def __repr__(self) -> str:
        return f"<SchemaStore v{self.version} {len(self.dictionary)} names {self.root.node_count()} nodes>"


def _render(node: SchemaNode, dictionary: FieldNameDictionary) -> Dict[str, Any]:
    if node.kind == NodeKind.OBJECT:
        return {
            "kind": "object",
            "count": node.counter,
            "fields": {dictionary.name_of(fid): _render(c, dictionary) for fid, c in node.fields.items()},
        }
    if node.kind == NodeKind.ARRAY:
        out = {"kind": "array", "count": node.counter}
        if node.item is not None:
            out["item"] = _render(node.item, dictionary)
        return out
    if node.kind == NodeKind.UNION:
        return {
            "kind": "union",
            "count": node.counter,
            "branches": {
                _kind_name(k): _render(b, dictionary) for k, b in sorted(node.branches.items())
            },
        }
    return {"kind": node.scalar.name.lower(), "count": node.counter}


def _kind_name(kind: int) -> str:
    return TypeTag(kind).name.lower()


# ---------------------------------------------------------------------------
# Inference and anti-schema extraction
# ---------------------------------------------------------------------------


def _visit(existing: Optional[SchemaNode], tag: int) -> Tuple[SchemaNode, SchemaNode]:
    """Count one value of kind ``tag`` in a slot; returns (slot node, node of the value)."""
    if existing is None:
        node = _new_node(tag)
        node.counter = 1
        return node, node
    if existing.kind == NodeKind.UNION:
        branch = existing.branches.get(tag)
        if branch is None:
            branch = existing.branches[tag] = _new_node(tag)
        branch.counter += 1
        existing.counter += 1
        return existing, branch
    if existing.value_kind == tag:
        existing.counter += 1
        return existing, existing
    node = _new_node(tag)
    node.counter = 1
    union = SchemaNode(
        NodeKind.UNION,
        counter=existing.counter + 1,
        branches={existing.value_kind: existing, tag: node},
    )
    return union, node


_NESTS = (TypeTag.OBJECT, TypeTag.ARRAY)
_CLOSERS = (TypeTag.CLOSE_NEST, TypeTag.EOV)


def _accumulate(rec: VBRecord, root: SchemaNode, field_id: Callable[[FieldRef], int]) -> None:
    events = iter_events(rec, resolve_names=False)
    root_tag, _ = next(events)
    if root_tag != TypeTag.OBJECT:
        raise SchemaError("record root must be an object")
    root.counter += 1
    # None marks a declared field's subtree, which is not recorded
    stack: List[Optional[SchemaNode]] = [root]
    for tag, ref in events:
        if tag in _CLOSERS:
            stack.pop()
            continue
        parent = stack[-1]
        if parent is None:
            if tag in _NESTS:
                stack.append(None)
            continue
        if parent.kind == NodeKind.OBJECT:
            if ref.declared:
                if tag in _NESTS:
                    stack.append(None)
                continue
            fid = field_id(ref)
            parent.fields[fid], target = _visit(parent.fields.get(fid), tag)
        else:
            parent.item, target = _visit(parent.item, tag)
        if tag in _NESTS:
            stack.append(target)


def infer_schema(rec: VBRecord, s: SchemaStore) -> SchemaStore:
    """
    Fold one uncompacted record into the schema.

    Args:
        rec (VBRecord): Uncompacted record.
        s (SchemaStore): Store to update in place.

    Returns:
        SchemaStore: The updated store.
    """
    if rec.compacted:
        raise SchemaError("schema inference needs an uncompacted record")
    _accumulate(rec, s.root, lambda ref: s.dictionary.get_or_add(ref.name))
    s.version += 1
    return s


def extract_anti_schema(rec: VBRecord, s: SchemaStore) -> SchemaNode:
    """
    Build the anti-schema of an old record image without touching ``s``.

    Args:
        rec (VBRecord): Old record, compacted or not.
        s (SchemaStore): Store whose dictionary holds the record's names.

    Returns:
        SchemaNode: Tree of per-node decrement counts.
    """

    def field_id(ref: FieldRef) -> int:
        if rec.compacted:
            if ref.payload >= len(s.dictionary):
                raise SchemaError(f"FieldNameID {ref.payload} not in the dictionary")
            return ref.payload
        fid = s.dictionary.lookup(ref.name)
        if fid is None:
            raise SchemaError(f"field name {ref.name!r} not in the dictionary")
        return fid

    anti = SchemaNode(NodeKind.OBJECT)
    _accumulate(rec, anti, field_id)
    return anti


def _subtract(target: SchemaNode, anti: SchemaNode) -> Optional[SchemaNode]:
    """Decrement ``target`` by ``anti``; returns the surviving slot node or None."""
    if target.kind == NodeKind.UNION and anti.kind != NodeKind.UNION:
        key = anti.value_kind
        branch = target.branches.get(key)
        if branch is None:
            raise SchemaError(f"anti-schema branch {_kind_name(key)} missing from the schema")
        survivor = _subtract(branch, anti)
        if survivor is None:
            del target.branches[key]
        else:
            target.branches[key] = survivor
        target.counter -= anti.counter
    else:
        if target.value_kind != anti.value_kind:
            raise SchemaError("anti-schema shape does not match the schema")
        if target.counter < anti.counter:
            raise SchemaError(f"counter {target.counter} would drop below zero by {anti.counter}")
        target.counter -= anti.counter
        if anti.kind == NodeKind.OBJECT:
            for fid, child in anti.fields.items():
                existing = target.fields.get(fid)
                if existing is None:
                    raise SchemaError(f"anti-schema field {fid} missing from the schema")
                survivor = _subtract(existing, child)
                if survivor is None:
                    del target.fields[fid]
                else:
                    target.fields[fid] = survivor
        elif anti.kind == NodeKind.ARRAY and anti.item is not None:
            if target.item is None:
                raise SchemaError("anti-schema array item missing from the schema")
            target.item = _subtract(target.item, anti.item)
        elif anti.kind == NodeKind.UNION:
            for key, branch in anti.branches.items():
                existing = target.branches.get(key)
                if existing is None:
                    raise SchemaError(f"anti-schema branch {_kind_name(key)} missing from the schema")
                survivor = _subtract(existing, branch)
                if survivor is None:
                    del target.branches[key]
                else:
                    target.branches[key] = survivor
    if target.counter == 0:
        return None
    if target.kind == NodeKind.UNION and len(target.branches) == 1:
        return next(iter(target.branches.values()))
    return target


def apply_anti_schema(a: SchemaNode, s: SchemaStore) -> SchemaStore:
    """
    Remove a deleted record's contribution from the schema.

    Args:
        a (SchemaNode): Anti-schema from :func:`extract_anti_schema`.
        s (SchemaStore): Store to update in place.

    Returns:
        SchemaStore: The updated store; the root survives even at counter zero.
    """
    if a.kind != NodeKind.OBJECT:
        raise SchemaError("anti-schema root must be an object")
    if s.root.counter < a.counter:
        raise SchemaError("anti-schema removes more records than the schema holds")
    root_counter = s.root.counter - a.counter
    # bump so the root cannot vanish; restored right after
    s.root.counter += 1
    _subtract(s.root, a)
    s.root.counter = root_counter
    s.version += 1
    return s


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------


def lookup_name(s: SchemaStore, name: str) -> Optional[int]:
    return s.dictionary.lookup(name)


def resolve_path(s: SchemaStore, path: PathExpr) -> List[SchemaNode]:
    """Nodes a path can reach; unions fan out to their branches before each step."""
    nodes = [s.root]
    for step in path.steps:
        expanded = []
        for node in nodes:
            expanded.extend(node.branches.values() if node.kind == NodeKind.UNION else [node])
        nodes = []
        if isinstance(step, Field):
            fid = s.dictionary.lookup(step.name)
            if fid is None:
                return []
            for node in expanded:
                if node.kind == NodeKind.OBJECT and fid in node.fields:
                    nodes.append(node.fields[fid])
        else:
            for node in expanded:
                if node.kind == NodeKind.ARRAY and node.item is not None:
                    nodes.append(node.item)
        if not nodes:
            return []
    return nodes


def leaf_kinds(nodes: List[SchemaNode]) -> List[int]:
    """Value kinds of ``nodes`` with unions flattened."""
    kinds = []
    for node in nodes:
        if node.kind == NodeKind.UNION:
            kinds.extend(node.branches.keys())
        else:
            kinds.append(node.value_kind)
    return kinds


def schema_summary(s: SchemaStore) -> SchemaSummary:
    return s.summary()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _write_node(out: io.BytesIO, node: SchemaNode) -> None:
    out.write(bytes((node.kind,)))
    if node.kind == NodeKind.SCALAR:
        out.write(bytes((node.scalar,)))
    write_varint(out, node.counter)
    if node.kind == NodeKind.OBJECT:
        write_varint(out, len(node.fields))
        for fid, child in node.fields.items():
            write_varint(out, fid)
            _write_node(out, child)
    else:
        children = node.children()
        write_varint(out, len(children))
        for child in children:
            _write_node(out, child)


def serialize_schema(s: SchemaStore) -> bytes:
    """Encode the store as an immutable metadata blob."""
    out = io.BytesIO()
    names = s.dictionary.names
    out.write(_BLOB_HEADER.pack(SCHEMA_MAGIC, SCHEMA_FORMAT_VERSION, s.version, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        out.write(_NAME_LEN.pack(len(raw)))
        out.write(raw)
    _write_node(out, s.root)
    return out.getvalue()


class _BlobReader:
    def __init__(self, data: bytes, pos: int, dictionary_size: int):
        self.data = data
        self.pos = pos
        self.dictionary_size = dictionary_size

    def byte(self) -> int:
        if self.pos >= len(self.data):
            raise SchemaCorruptError("schema blob truncated")
        value = self.data[self.pos]
        self.pos += 1
        return value

    def varint(self) -> int:
        try:
            value, self.pos = read_varint(self.data, self.pos)
        except ValueError as e:
            raise SchemaCorruptError(f"schema blob: {e}") from e
        return value

    def node(self, depth: int = 0) -> SchemaNode:
        if depth > 4096:
            raise SchemaCorruptError("schema blob nests too deeply")
        try:
            kind = NodeKind(self.byte())
            scalar = TypeTag(self.byte()) if kind == NodeKind.SCALAR else None
        except ValueError as e:
            raise SchemaCorruptError(f"schema blob: {e}") from e
        node = SchemaNode(kind, counter=self.varint(), scalar=scalar)
        count = self.varint()
        if kind == NodeKind.OBJECT:
            for _ in range(count):
                fid = self.varint()
                if fid >= self.dictionary_size:
                    raise SchemaCorruptError(f"FieldNameID {fid} outside the dictionary")
                node.fields[fid] = self.node(depth + 1)
        elif kind == NodeKind.ARRAY:
            if count > 1:
                raise SchemaCorruptError("array node with more than one item")
            if count:
                node.item = self.node(depth + 1)
        elif kind == NodeKind.UNION:
            for _ in range(count):
                branch = self.node(depth + 1)
                node.branches[branch.value_kind] = branch
        elif count:
            raise SchemaCorruptError("scalar node with children")
        return node


def deserialize_schema(data: bytes) -> SchemaStore:
    """Decode a blob written by :func:`serialize_schema`."""
    if len(data) < _BLOB_HEADER.size:
        raise SchemaCorruptError("schema blob truncated")
    magic, fmt, version, count = _BLOB_HEADER.unpack_from(data)
    if magic != SCHEMA_MAGIC:
        raise SchemaCorruptError(f"bad schema magic {magic!r}")
    if fmt != SCHEMA_FORMAT_VERSION:
        raise SchemaCorruptError(f"unsupported schema format version {fmt}")
    pos = _BLOB_HEADER.size
    names = []
    for _ in range(count):
        if pos + _NAME_LEN.size > len(data):
            raise SchemaCorruptError("schema dictionary truncated")
        (length,) = _NAME_LEN.unpack_from(data, pos)
        pos += _NAME_LEN.size
        raw = data[pos:pos + length]
        if len(raw) != length:
            raise SchemaCorruptError("schema dictionary truncated")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise SchemaCorruptError("schema dictionary is not UTF-8") from e
        pos += length
    reader = _BlobReader(data, pos, count)
    root = reader.node()
    if root.kind != NodeKind.OBJECT:
        raise SchemaCorruptError("schema root is not an object")
    if reader.pos != len(data):
        raise SchemaCorruptError("trailing bytes after schema tree")
    return SchemaStore(root, FieldNameDictionary(names), version)
