"""
Storage comparison of a dataset's live records.

The same records are re-encoded through two pipelines: ``open`` keeps field names
inline in every record (uncompacted vector-based records, the self-describing
layout), ``inferred`` infers one schema per partition and compacts every record
against it, counting the schema blob. Each is measured raw and page-compressed.
"""
import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Tuple

from src.schemas.stats import ComponentStats, EncodingSize, StatsReport
from src.services.component import ENTRY_RECORD, encode_entry
from src.services.dataset_service import DatasetHandle
from src.services.page_compression import DEFAULT_CODEC, compressed_size
from src.services.schema_store import SchemaStore, infer_schema, serialize_schema
from src.services.vb_record import VBRecord, compact, decode, encode

logger = logging.getLogger(__name__)


def live_documents(dataset: DatasetHandle) -> List[List[Tuple[bytes, Any]]]:
    """Decoded live documents of every partition, in key order."""
    declared = dataset.config.declared
    return [
        [(item.key, decode(item.record, item.schema, declared)) for item in engine.scan()]
        for engine in dataset.partitions
    ]


@dataclass
class EncodedPartition:
    """One partition's live documents under both encodings."""
    open_records: List[Tuple[bytes, VBRecord]]
    inferred_records: List[Tuple[bytes, VBRecord]]
    schema: SchemaStore


def encode_partition(docs: List[Tuple[bytes, Any]], declared) -> EncodedPartition:
    open_records = [(key, encode(doc, declared)) for key, doc in docs]
    schema = SchemaStore()
    for _, rec in open_records:
        infer_schema(rec, schema)
    inferred_records = [(key, compact(rec, schema)) for key, rec in open_records]
    return EncodedPartition(open_records, inferred_records, schema)


def encode_streams(partitions: List[List[Tuple[bytes, Any]]], declared) -> Tuple[bytes, bytes]:
    """Component entry streams of the open and inferred encodings."""
    open_stream = bytearray()
    inferred_stream = bytearray()
    for docs in partitions:
        part = encode_partition(docs, declared)
        for key, rec in part.open_records:
            open_stream += encode_entry(key, ENTRY_RECORD, rec)
        for key, rec in part.inferred_records:
            inferred_stream += encode_entry(key, ENTRY_RECORD, rec)
        if part.inferred_records:
            inferred_stream += serialize_schema(part.schema)
    return bytes(open_stream), bytes(inferred_stream)


def build_stats_report(dataset: DatasetHandle, codec: Optional[str] = None, page_size: int = 128 * 1024) -> StatsReport:
    """
    Measure a dataset under the open and inferred encodings.

    Args:
        dataset (DatasetHandle): Open dataset.
        codec (Optional[str]): Codec for the compressed columns; defaults to the
            dataset's codec or zlib.
        page_size (int): Logical page size for the compressed columns.

    Returns:
        StatsReport: Encoding sizes, component sizes and schema sizes.
    """
    codec = codec or dataset.config.compression or DEFAULT_CODEC
    partitions = live_documents(dataset)
    open_stream, inferred_stream = encode_streams(partitions, dataset.config.declared)

    encodings = []
    for name, stream in (("open", open_stream), ("inferred", inferred_stream)):
        encodings.append(EncodingSize(
            encoding=name,
            uncompressed_bytes=len(stream),
            compressed_bytes=compressed_size(stream, codec, page_size) if stream else 0,
        ))

    components = []
    nodes = entries = name_bytes = 0
    for pid, engine in enumerate(dataset.partitions):
        for comp in engine.components:
            meta = comp.load_meta()
            components.append(ComponentStats(
                partition=pid,
                component=str(comp.cid),
                entry_count=meta.entry_count,
                record_count=meta.record_count,
                size_bytes=comp.size_bytes,
            ))
        summary = engine.schema.summary()
        nodes += summary.node_count
        entries += summary.dictionary_entries
        name_bytes += summary.dictionary_bytes

    report = StatsReport(
        dataset=dataset.config.name,
        live_records=sum(len(docs) for docs in partitions),
        codec=codec,
        encodings=encodings,
        components=components,
        total_component_bytes=sum(c.size_bytes for c in components),
        schema_nodes=nodes,
        dictionary_entries=entries,
        dictionary_bytes=name_bytes,
    )
    logger.info(
        "Stats for %s: %d live records, open %d bytes, inferred %d bytes",
        report.dataset, report.live_records, len(open_stream), len(inferred_stream),
    )
    return report


def render_table(report: StatsReport) -> str:
    lines = [
        f"dataset {report.dataset}: {report.live_records} live records",
        "open = uncompacted records with inline field names (self-describing layout)",
        "inferred = records compacted against one inferred schema per partition",
        "",
        f"{'encoding':<10}{'bytes':>14}{'compressed (' + report.codec + ')':>24}",
    ]
    for e in report.encodings:
        lines.append(f"{e.encoding:<10}{e.uncompressed_bytes:>14}{e.compressed_bytes:>24}")
    open_size = report.encoding("open").uncompressed_bytes
    if open_size:
        lines.append(f"inferred/open ratio: {report.encoding('inferred').uncompressed_bytes / open_size:.3f}")
    lines.append("")
    lines.append(f"{'partition':<11}{'component':<16}{'entries':>10}{'records':>10}{'bytes':>14}")
    for c in report.components:
        lines.append(f"{c.partition:<11}{c.component:<16}{c.entry_count:>10}{c.record_count:>10}{c.size_bytes:>14}")
    lines.append(f"total component bytes: {report.total_component_bytes}")
    lines.append(
        f"schema: {report.schema_nodes} nodes, {report.dictionary_entries} names, "
        f"{report.dictionary_bytes} dictionary bytes"
    )
    return "\n".join(lines)
