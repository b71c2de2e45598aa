"""
Partition-parallel query execution over compacted records.

A plan is a per-partition pipeline ``Scan -> [Unnest] -> [Filter] -> tail`` where
the tail is a projection, a local partial aggregation, or a hash-partitioned
group-by. Every executor runs the same pipeline over its own partition. The hash
exchange in front of a keyed group-by is the only non-local exchange; when a plan
has one, each partition's component schemas are registered (broadcast) before any
executor starts, and records crossing the exchange are decoded through the registry.

With pushdown on, every path the query touches is extracted in one pass at the
scan. With pushdown off, each operator extracts the paths it needs when it needs
them, one record scan per access.
"""
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from src.core.exceptions import PlanError, SchemaRegistryError, VBStoreError
from src.core.types import MISSING, DeclaredKeySpec, TypeTag
from src.schemas.query import AggregateSpec, QuerySpec
from src.services.component import ComponentId
from src.services.dataset_service import DatasetHandle
from src.services.lsm_engine import PartitionEngine
from src.services.schema_store import SchemaStore, leaf_kinds, resolve_path
from src.services.vb_record import VBRecord, get_values, scan_probe
from src.utils.paths import PathExpr, navigate, parse_path

logger = logging.getLogger(__name__)

_NUMERIC = {TypeTag.INT64, TypeTag.DOUBLE, TypeTag.NULL}
_DONE = object()


class ExchangeKind(str, Enum):
    LOCAL = "local"
    HASH_PARTITION = "hash-partition"
    BROADCAST = "broadcast"


# ---------------------------------------------------------------------------
# Plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    """Either the unnest variable or a path on the scanned record."""

    text: str
    path: Optional[PathExpr] = None
    var: Optional[str] = None


@dataclass
class Scan:
    dataset: str
    partitions: int
    pushed_paths: List[PathExpr]


@dataclass
class Unnest:
    path: PathExpr
    var: str
    prefix: PathExpr
    suffix: Tuple


@dataclass
class Filter:
    predicates: List[Tuple[Ref, str, Any]]


@dataclass
class Aggregate:
    fn: str
    ref: Optional[Ref]
    name: str


@dataclass
class GroupBy:
    keys: List[Tuple[Ref, str]]
    aggregates: List[Aggregate]


@dataclass
class Project:
    items: List[Tuple[Ref, str]]


@dataclass
class OrderByLimit:
    order: List[Tuple[str, bool]]
    limit: Optional[int]


@dataclass
class Exchange:
    kind: ExchangeKind
    key: Optional[List[str]] = None

    @property
    def non_local(self) -> bool:
        return self.kind != ExchangeKind.LOCAL


@dataclass
class QueryPlan:
    scan: Scan
    unnest: Optional[Unnest]
    filter: Optional[Filter]
    group_by: Optional[GroupBy]
    project: Optional[Project]
    order_by: OrderByLimit
    exchanges: List[Exchange]
    pushdown: bool

    @property
    def non_local(self) -> bool:
        return any(e.non_local for e in self.exchanges)

    @property
    def keyed_group_by(self) -> bool:
        return self.group_by is not None and bool(self.group_by.keys)

    def explain(self) -> List[str]:
        lines = [f"scan {self.scan.dataset} x{self.scan.partitions} pushed={[str(p) for p in self.scan.pushed_paths]}"]
        if self.unnest:
            lines.append(f"unnest {self.unnest.path} as ${self.unnest.var}")
        if self.filter:
            lines.append("filter " + " and ".join(f"{r.text} {op} {v!r}" for r, op, v in self.filter.predicates))
        for exchange in self.exchanges:
            lines.append(f"exchange {exchange.kind.value}" + (f" on {exchange.key}" if exchange.key else ""))
        if self.group_by:
            aggs = [f"{a.fn}({a.ref.text if a.ref else '*'})" for a in self.group_by.aggregates]
            lines.append(f"group-by {[name for _, name in self.group_by.keys]} {aggs}")
        if self.project:
            lines.append(f"project {[name for _, name in self.project.items]}")
        if self.order_by.order or self.order_by.limit is not None:
            lines.append(f"order-by {self.order_by.order} limit {self.order_by.limit}")
        return lines


def _parse_ref(text: str, var: Optional[str]) -> Ref:
    if text.startswith("$"):
        name = text[1:]
        if var is None or name != var:
            raise PlanError(f"variable {text} is not produced by an unnest")
        return Ref(text, var=name)
    try:
        return Ref(text, path=parse_path(text))
    except ValueError as e:
        raise PlanError(str(e)) from e


def _check_numeric(ref: Ref, unnest: Optional[Unnest], schemas: Sequence[Optional[SchemaStore]], fn: str) -> None:
    path = unnest.path if ref.var is not None else ref.path
    for schema in schemas:
        if schema is None:
            continue
        kinds = set(leaf_kinds(resolve_path(schema, path)))
        bad = kinds - _NUMERIC
        if bad:
            names = sorted(TypeTag(k).name.lower() for k in bad)
            raise PlanError(f"{fn}({ref.text}) over non-numeric values: {', '.join(names)}")


def plan(spec: QuerySpec, dataset: DatasetHandle, pushdown: bool = True) -> QueryPlan:
    """
    Build the executable plan for a query document.

    Args:
        spec (QuerySpec): Parsed query document.
        dataset (DatasetHandle): Open dataset the query targets.
        pushdown (bool): Consolidate field accesses at the scan (``spec.pushdown`` wins).

    Returns:
        QueryPlan: The plan.
    """
    if spec.dataset != dataset.config.name:
        raise PlanError(f"query targets {spec.dataset!r} but dataset {dataset.config.name!r} is open")
    pushdown = spec.pushdown if spec.pushdown is not None else pushdown

    unnest = None
    var = None
    if spec.unnest is not None:
        path = _parse_ref(spec.unnest.path, None).path
        if path.wildcard_count != 1:
            raise PlanError("an unnest path needs exactly one [*] step")
        prefix, suffix = path.split_at_wildcard()
        if not prefix:
            raise PlanError("an unnest path must start with a field")
        var = spec.unnest.as_
        unnest = Unnest(path, var, PathExpr(prefix), suffix)

    predicates = [(_parse_ref(p.ref, var), p.op, p.value) for p in spec.where]
    group_by = project = None
    exchanges: List[Exchange] = []
    if spec.group_by is not None:
        keys = [(_parse_ref(k.ref, var), k.as_) for k in spec.group_by.keys]
        aggregates = [
            Aggregate(a.fn, _parse_ref(a.ref, var) if a.ref is not None else None, a.as_)
            for a in spec.group_by.aggregates
        ]
        group_by = GroupBy(keys, aggregates)
        exchanges.append(Exchange(ExchangeKind.HASH_PARTITION, [name for _, name in keys]) if keys
                         else Exchange(ExchangeKind.LOCAL))
    else:
        project = Project([(_parse_ref(s.ref, var), s.as_) for s in spec.select])
        exchanges.append(Exchange(ExchangeKind.LOCAL))

    if group_by is not None:
        schemas = [engine.schema for engine in dataset.partitions]
        for agg in group_by.aggregates:
            if agg.fn in ("SUM", "AVG"):
                _check_numeric(agg.ref, unnest, schemas, agg.fn)

    refs = [r for r, _, _ in predicates]
    if group_by is not None:
        refs += [r for r, _ in group_by.keys] + [a.ref for a in group_by.aggregates if a.ref is not None]
    if project is not None:
        refs += [r for r, _ in project.items]
    pushed: List[PathExpr] = []
    if pushdown:
        candidates = [unnest.path] if unnest is not None else []
        candidates += [r.path for r in refs if r.path is not None]
        for path in candidates:
            if path not in pushed:
                pushed.append(path)

    result = QueryPlan(
        scan=Scan(dataset.config.name, len(dataset.partitions), pushed),
        unnest=unnest,
        filter=Filter(predicates) if predicates else None,
        group_by=group_by,
        project=project,
        order_by=OrderByLimit([(o.field, o.desc) for o in spec.order_by], spec.limit),
        exchanges=exchanges,
        pushdown=pushdown,
    )
    logger.debug("Plan: %s", " | ".join(result.explain()))
    return result


# ---------------------------------------------------------------------------
# Schema registry
# ---------------------------------------------------------------------------


class SchemaRegistry:
    """Per-partition component schemas, frozen for the lifetime of one query."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snapshots: Dict[int, Dict[ComponentId, Optional[SchemaStore]]] = {}
        self.broadcasts = 0

    def register(self, partition_id: int, snapshot: Dict[ComponentId, Optional[SchemaStore]]) -> None:
        with self._lock:
            self._snapshots[partition_id] = dict(snapshot)
            self.broadcasts += 1

    def lookup(self, partition_id: int, source: Optional[ComponentId]) -> Optional[SchemaStore]:
        snapshot = self._snapshots.get(partition_id)
        if snapshot is None:
            raise SchemaRegistryError(f"no schema registered for partition {partition_id}")
        if source is None:
            return None
        if source not in snapshot:
            raise SchemaRegistryError(f"partition {partition_id} has no schema for component {source}")
        return snapshot[source]


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass
class TaggedRecord:
    partition_id: int
    source: Optional[ComponentId]
    record: VBRecord
    schema: Optional[SchemaStore]
    values: Dict[PathExpr, Any]
    var_value: Any = MISSING


@dataclass
class QueryStats:
    records_scanned: int = 0
    vector_scans: int = 0
    broadcasts: int = 0
    rows: int = 0
    elapsed_seconds: float = 0.0


@dataclass
class QueryResult:
    rows: List[Dict[str, Any]]
    stats: QueryStats
    plan: QueryPlan


class _Context:
    def __init__(self, plan: QueryPlan, declared: DeclaredKeySpec, registry: Optional[SchemaRegistry]):
        self.plan = plan
        self.declared = declared
        self.registry = registry
        self.cancel = threading.Event()
        self._lock = threading.Lock()
        self.records_scanned = 0

    def scanned(self, n: int) -> None:
        with self._lock:
            self.records_scanned += n

    def value(self, row: TaggedRecord, ref: Ref, crossed: bool = False) -> Any:
        if ref.var is not None:
            return row.var_value
        if ref.path in row.values:
            return row.values[ref.path]
        schema = self.registry.lookup(row.partition_id, row.source) if crossed else row.schema
        # one record scan per access when fields are not pushed to the scan
        return get_values(row.record, schema, self.declared, [ref.path])[0]


def _compare(op: str, left: Any, right: Any) -> bool:
    if op == "exists":
        return left is not MISSING
    if left is MISSING:
        return False
    try:
        if op == "=":
            return left == right
        if op == "!=":
            return left != right
        if left is None or right is None:
            return False
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        if op == ">=":
            return left >= right
    except TypeError:
        return False
    raise PlanError(f"unknown operator {op}")


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return ("__list__",) + tuple(_freeze(v) for v in value)
    if isinstance(value, dict):
        return ("__dict__",) + tuple((k, _freeze(v)) for k, v in value.items())
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple) and value and value[0] == "__list__":
        return [_thaw(v) for v in value[1:]]
    if isinstance(value, tuple) and value and value[0] == "__dict__":
        return {k: _thaw(v) for k, v in value[1:]}
    return value


class _Accumulator:
    """Partial state of one aggregate; partials combine associatively."""

    __slots__ = ("fn", "count", "total", "best")

    def __init__(self, fn: str):
        self.fn = fn
        self.count = 0
        self.total = 0
        self.best = MISSING

    def add(self, value: Any, counts_rows: bool) -> None:
        if self.fn == "COUNT":
            if counts_rows or (value is not MISSING and value is not None):
                self.count += 1
            return
        if value is MISSING or value is None:
            return
        if self.fn in ("SUM", "AVG"):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return
            self.total += value
            self.count += 1
            return
        if self.best is MISSING or self._beats(value, self.best):
            self.best = value

    def _beats(self, value: Any, best: Any) -> bool:
        # values of different kinds order by kind rank, as ORDER BY does
        if self.fn == "MIN":
            return extremum_key(value) < extremum_key(best)
        return extremum_key(value) > extremum_key(best)

    def combine(self, other: "_Accumulator") -> None:
        self.count += other.count
        self.total += other.total
        if other.best is not MISSING and (self.best is MISSING or self._beats(other.best, self.best)):
            self.best = other.best

    def result(self) -> Any:
        if self.fn == "COUNT":
            return self.count
        if self.fn == "SUM":
            return self.total if self.count else None
        if self.fn == "AVG":
            return self.total / self.count if self.count else None
        return None if self.best is MISSING else self.best


def _rows_of(ctx: _Context, partition_id: int, engine: PartitionEngine) -> Iterator[TaggedRecord]:
    """Scan, unnest and filter one partition."""
    plan = ctx.plan
    pushed = plan.scan.pushed_paths
    scanned = 0
    for item in engine.scan():
        if ctx.cancel.is_set():
            break
        scanned += 1
        values = {}
        if pushed:
            values = dict(zip(pushed, get_values(item.record, item.schema, ctx.declared, pushed)))
        row = TaggedRecord(partition_id, item.source, item.record, item.schema, values)
        if plan.unnest is None:
            candidates = [row]
        else:
            candidates = []
            if plan.pushdown:
                items = values[plan.unnest.path]
                items = items if isinstance(items, list) else []
            else:
                array = ctx.value(row, Ref(str(plan.unnest.prefix), path=plan.unnest.prefix))
                items = []
                if isinstance(array, list):
                    for element in array:
                        found = navigate(element, plan.unnest.suffix)
                        if found is not MISSING:
                            items.append(found)
            for element in items:
                candidates.append(TaggedRecord(partition_id, item.source, item.record, item.schema, values, element))
        for candidate in candidates:
            if plan.filter is not None:
                # every predicate is evaluated so per-record access counts stay fixed
                outcomes = [_compare(op, ctx.value(candidate, ref), value) for ref, op, value in plan.filter.predicates]
                if not all(outcomes):
                    continue
            yield candidate
    ctx.scanned(scanned)


def _project(ctx: _Context, rows: Iterator[TaggedRecord]) -> List[Dict[str, Any]]:
    out = []
    for row in rows:
        result = {}
        for ref, name in ctx.plan.project.items:
            value = ctx.value(row, ref)
            if value is not MISSING:
                result[name] = value
        out.append(result)
    return out


def _aggregate_into(ctx: _Context, groups: Dict[tuple, List[_Accumulator]], key: tuple, row: TaggedRecord,
                    crossed: bool) -> None:
    accs = groups.get(key)
    if accs is None:
        accs = groups[key] = [_Accumulator(a.fn) for a in ctx.plan.group_by.aggregates]
    for acc, agg in zip(accs, ctx.plan.group_by.aggregates):
        value = ctx.value(row, agg.ref, crossed) if agg.ref is not None else MISSING
        acc.add(value, counts_rows=agg.ref is None)


def _group_rows(ctx: _Context, groups: Dict[tuple, List[_Accumulator]]) -> List[Dict[str, Any]]:
    out = []
    key_names = [name for _, name in ctx.plan.group_by.keys]
    for key, accs in groups.items():
        row = {}
        for name, value in zip(key_names, key):
            if value is not MISSING:
                row[name] = _thaw(value)
        for agg, acc in zip(ctx.plan.group_by.aggregates, accs):
            row[agg.name] = acc.result()
        out.append(row)
    return out


def _sort_key(value: Any) -> tuple:
    if value is MISSING or value is None:
        return (0,)
    if isinstance(value, bool):
        return (1, value)
    if isinstance(value, (int, float)):
        return (2, value)
    if isinstance(value, str):
        return (3, value)
    return (4, repr(value))


def extremum_key(value: Any) -> tuple:
    """Total order for MIN/MAX; ties between 1 and 1.0 break on the type name."""
    return _sort_key(value) + (type(value).__name__,)


def order_and_limit(rows: List[Dict[str, Any]], order: OrderByLimit) -> List[Dict[str, Any]]:
    for name, desc in reversed(order.order):
        rows.sort(key=lambda r: _sort_key(r.get(name, MISSING)), reverse=desc)
    if order.limit is not None:
        rows = rows[:order.limit]
    return rows


def _put(ctx: _Context, q: queue.Queue, item: Any) -> None:
    while not ctx.cancel.is_set():
        try:
            q.put(item, timeout=0.1)
            return
        except queue.Full:
            continue


def execute(plan: QueryPlan, dataset: DatasetHandle, queue_size: int = 1024) -> QueryResult:
    """
    Run a plan with one executor per partition.

    Args:
        plan (QueryPlan): Plan from :func:`plan`.
        dataset (DatasetHandle): Dataset to read; assumed quiescent.
        queue_size (int): Capacity of each hash-exchange queue.

    Returns:
        QueryResult: Rows after order-by/limit, with execution counters.
    """
    started = time.perf_counter()
    probe_before = scan_probe.count
    partitions = dataset.partitions
    registry = None
    if plan.non_local:
        registry = SchemaRegistry()
        for pid, engine in enumerate(partitions):
            registry.register(pid, engine.schema_snapshot())
    ctx = _Context(plan, dataset.config.declared, registry)
    n = len(partitions)
    rows: List[Dict[str, Any]] = []

    try:
        if plan.project is not None:
            with ThreadPoolExecutor(max_workers=n, thread_name_prefix="scan") as pool:
                futures = [pool.submit(lambda p=p, e=e: _project(ctx, _rows_of(ctx, p, e))) for p, e in enumerate(partitions)]
                for future in futures:
                    rows.extend(future.result())
        elif not plan.keyed_group_by:
            def partial(pid: int, engine: PartitionEngine) -> List[_Accumulator]:
                groups: Dict[tuple, List[_Accumulator]] = {}
                for row in _rows_of(ctx, pid, engine):
                    _aggregate_into(ctx, groups, (), row, crossed=False)
                return groups.get((), [_Accumulator(a.fn) for a in plan.group_by.aggregates])

            with ThreadPoolExecutor(max_workers=n, thread_name_prefix="scan") as pool:
                futures = [pool.submit(partial, p, e) for p, e in enumerate(partitions)]
                totals = [_Accumulator(a.fn) for a in plan.group_by.aggregates]
                for future in futures:
                    for total, part in zip(totals, future.result()):
                        total.combine(part)
            rows = [{agg.name: acc.result() for agg, acc in zip(plan.group_by.aggregates, totals)}]
        else:
            rows = _run_hash_group_by(ctx, partitions, queue_size)
    except BaseException:
        ctx.cancel.set()
        raise

    rows = order_and_limit(rows, plan.order_by)
    stats = QueryStats(
        records_scanned=ctx.records_scanned,
        vector_scans=scan_probe.count - probe_before,
        broadcasts=registry.broadcasts if registry is not None else 0,
        rows=len(rows),
        elapsed_seconds=time.perf_counter() - started,
    )
    logger.info(
        "Query over %s: %d rows, %d records scanned, %d vector scans, %d broadcasts",
        plan.scan.dataset, stats.rows, stats.records_scanned, stats.vector_scans, stats.broadcasts,
    )
    return QueryResult(rows, stats, plan)


def _run_hash_group_by(ctx: _Context, partitions: List[PartitionEngine], queue_size: int) -> List[Dict[str, Any]]:
    n = len(partitions)
    queues = [queue.Queue(maxsize=queue_size) for _ in range(n)]
    keys = ctx.plan.group_by.keys

    def produce(pid: int, engine: PartitionEngine) -> None:
        try:
            for row in _rows_of(ctx, pid, engine):
                key = tuple(_freeze(ctx.value(row, ref)) for ref, _ in keys)
                _put(ctx, queues[hash(key) % n], (key, row))
        finally:
            for q in queues:
                _put(ctx, q, _DONE)

    def consume(cid: int) -> List[Dict[str, Any]]:
        groups: Dict[tuple, List[_Accumulator]] = {}
        remaining = n
        while remaining:
            if ctx.cancel.is_set():
                return []
            try:
                item = queues[cid].get(timeout=0.1)
            except queue.Empty:
                continue
            if item is _DONE:
                remaining -= 1
                continue
            key, row = item
            _aggregate_into(ctx, groups, key, row, crossed=True)
        return _group_rows(ctx, groups)

    rows: List[Dict[str, Any]] = []
    with ThreadPoolExecutor(max_workers=2 * n, thread_name_prefix="exchange") as pool:
        producers = [pool.submit(produce, p, e) for p, e in enumerate(partitions)]
        consumers = [pool.submit(consume, c) for c in range(n)]
        try:
            for future in producers:
                future.result()
            for future in consumers:
                rows.extend(future.result())
        except BaseException:
            ctx.cancel.set()
            raise
    return rows


def run_query(spec: QuerySpec, dataset: DatasetHandle, pushdown: bool = True, queue_size: int = 1024) -> QueryResult:
    """Plan and execute a query document."""
    try:
        return execute(plan(spec, dataset, pushdown), dataset, queue_size)
    except VBStoreError:
        raise
    except Exception as e:
        logger.error("Query over %s failed: %s", spec.dataset, e)
        raise
