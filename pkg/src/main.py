import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import click
from pydantic import ValidationError

from src.core import faults
from src.core.config import get_catalog_session, settings as default_settings
from src.core.exceptions import VBStoreError
from src.schemas.dataset import DatasetConfig
from src.schemas.query import QuerySpec
from src.services import crash_harness
from src.services.catalog_service import list_datasets_from_db
from src.services.dataset_service import create_dataset, drop_dataset, open_dataset
from src.services.datagen import GENERATORS
from src.services.query_engine import plan as plan_query, execute
from src.services.stats_service import build_stats_report, render_table
from src.utils.jsonio import JsonLineError, dumps_row, read_ndjson
from src.utils.keys import extract_key

logger = logging.getLogger(__name__)

ENVIRONMENT_EXIT_CODE = 3


class VBStoreGroup(click.Group):
    """Command group that turns storage errors into one-line CLI failures."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except crash_harness.CrashEnvironmentError as e:
            click.echo(f"Error: {e}", err=True)
            ctx.exit(ENVIRONMENT_EXIT_CODE)
        except (VBStoreError, ValidationError, JsonLineError) as e:
            raise click.ClickException(str(e).splitlines()[0] if str(e) else type(e).__name__) from e


def _open(ctx, name: str):
    obj = ctx.obj
    return open_dataset(name, obj["data_dir"], obj["settings"], **obj["overrides"])


@click.group(cls=VBStoreGroup)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None, help="Root data directory.")
@click.option("--partitions", type=click.IntRange(min=1), default=None, help="Partitions of new datasets.")
@click.option("--compression", default=None, help="Page codec (zlib, bz2, lzma) or off.")
@click.option("--pushdown", type=click.Choice(["on", "off"]), default=None, help="Value-access pushdown.")
@click.option("--memtable-bytes", type=click.IntRange(min=1), default=None)
@click.option("--merge-max-bytes", type=click.IntRange(min=1), default=None)
@click.option("--merge-tolerable-count", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None, help="Seed for generators and random crash points.")
@click.option("--log-level", default=None, help="Logging level.")
@click.pass_context
def cli(ctx, data_dir, partitions, compression, pushdown, memtable_bytes, merge_max_bytes,
        merge_tolerable_count, seed, log_level):
    """Multi-partition LSM document store over vector-based records."""
    update = {
        "DATA_DIR": data_dir,
        "PARTITIONS": partitions,
        "COMPRESSION": compression,
        "PUSHDOWN": None if pushdown is None else pushdown == "on",
        "MEMTABLE_BYTES": memtable_bytes,
        "MERGE_MAX_BYTES": merge_max_bytes,
        "MERGE_TOLERABLE_COUNT": merge_tolerable_count,
        "SEED": seed,
        "LOG_LEVEL": log_level,
    }
    settings = default_settings.model_copy(update={k: v for k, v in update.items() if v is not None})
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    overrides = {
        name: value
        for name, value in (
            ("memtable_bytes", memtable_bytes),
            ("merge_max_bytes", merge_max_bytes),
            ("merge_tolerable_count", merge_tolerable_count),
        )
        if value is not None
    }
    if settings.CRASH_POINT:
        faults.arm(settings.CRASH_POINT, settings.CRASH_MODE)
    ctx.obj = {"settings": settings, "data_dir": settings.DATA_DIR, "overrides": overrides}


@cli.command()
@click.argument("name")
@click.option("--primary-key", required=True, help="Primary key field of every document.")
@click.option("--declared", multiple=True, help="Extra declared root field (repeatable).")
@click.option("--compactor/--no-compactor", default=True, help="Infer schemas and compact records at flush.")
@click.pass_context
def create(ctx, name, primary_key, declared, compactor):
    """Create a dataset."""
    settings = ctx.obj["settings"]
    config = DatasetConfig(
        name=name,
        primary_key=primary_key,
        declared_fields=list(declared),
        tuple_compactor_enabled=compactor,
        compression=settings.codec_name,
        partitions=settings.PARTITIONS,
        memtable_bytes=settings.MEMTABLE_BYTES,
        merge_max_bytes=settings.MERGE_MAX_BYTES,
        merge_tolerable_count=settings.MERGE_TOLERABLE_COUNT,
    )
    create_dataset(config, ctx.obj["data_dir"])
    click.echo(f"created {name} ({config.partitions} partitions)")


@cli.command()
@click.argument("name")
@click.argument("source", type=click.File("r", encoding="utf-8"), default="-")
@click.option("--skip-bad-lines", is_flag=True, help="Log and skip malformed lines.")
@click.option("--strict/--no-strict", default=False, help="Reject documents whose key is already live.")
@click.pass_context
def ingest(ctx, name, source, skip_bad_lines, strict):
    """Feed NDJSON documents through the LSM write path."""
    count = 0
    with _open(ctx, name) as dataset:
        for _, doc in read_ndjson(source, skip_bad_lines=skip_bad_lines):
            dataset.insert(doc, strict=strict)
            count += 1
    click.echo(f"ingested {count} documents into {name}")


@cli.command()
@click.argument("name")
@click.argument("source", type=click.File("r", encoding="utf-8"), default="-")
@click.option("--skip-bad-lines", is_flag=True, help="Log and skip malformed lines.")
@click.pass_context
def load(ctx, name, source, skip_bad_lines):
    """Bulk-load NDJSON into one component per partition."""
    docs = [doc for _, doc in read_ndjson(source, skip_bad_lines=skip_bad_lines)]
    with _open(ctx, name) as dataset:
        built = [cid for cid in dataset.bulk_load(docs) if cid is not None]
    click.echo(f"loaded {len(docs)} documents into {name} ({len(built)} components)")


@cli.command()
@click.argument("name")
@click.argument("source", type=click.File("r", encoding="utf-8"), default="-")
@click.option("--skip-bad-lines", is_flag=True, help="Log and skip malformed lines.")
@click.pass_context
def delete(ctx, name, source, skip_bad_lines):
    """Delete keys read from NDJSON (bare keys or documents carrying the key)."""
    count = 0
    with _open(ctx, name) as dataset:
        for _, value in read_ndjson(source, skip_bad_lines=skip_bad_lines):
            key = extract_key(value, dataset.config.primary_key) if isinstance(value, dict) else value
            dataset.delete(key)
            count += 1
    click.echo(f"deleted {count} keys from {name}")


@cli.command()
@click.argument("name")
@click.argument("source", type=click.File("r", encoding="utf-8"), default="-")
@click.option("--skip-bad-lines", is_flag=True, help="Log and skip malformed lines.")
@click.pass_context
def upsert(ctx, name, source, skip_bad_lines):
    """Insert or replace NDJSON documents."""
    count = 0
    with _open(ctx, name) as dataset:
        for _, doc in read_ndjson(source, skip_bad_lines=skip_bad_lines):
            dataset.upsert(doc)
            count += 1
    click.echo(f"upserted {count} documents into {name}")


@cli.command()
@click.argument("name")
@click.pass_context
def flush(ctx, name):
    """Write buffered writes of every partition to disk components."""
    with _open(ctx, name) as dataset:
        built = [cid for cid in dataset.flush() if cid is not None]
    click.echo(f"flushed {name} ({len(built)} components)")


@cli.command()
@click.argument("plan_file", type=click.File("r", encoding="utf-8"))
@click.option("--explain", is_flag=True, help="Print the physical plan instead of running it.")
@click.option("--stats", "show_stats", is_flag=True, help="Print execution counters on stderr.")
@click.pass_context
def query(ctx, plan_file, explain, show_stats):
    """Run a JSON plan document and print NDJSON rows."""
    settings = ctx.obj["settings"]
    try:
        spec = QuerySpec.model_validate(json.load(plan_file))
    except json.JSONDecodeError as e:
        raise click.ClickException(f"plan is not valid JSON: {e}") from e
    pushdown = settings.PUSHDOWN if spec.pushdown is None else spec.pushdown
    with _open(ctx, spec.dataset) as dataset:
        physical = plan_query(spec, dataset, pushdown)
        if explain:
            for line in physical.explain():
                click.echo(line)
            return
        result = execute(physical, dataset, settings.EXCHANGE_QUEUE_SIZE)
    for row in result.rows:
        click.echo(dumps_row(row))
    if show_stats:
        s = result.stats
        click.echo(
            f"rows={s.rows} records_scanned={s.records_scanned} vector_scans={s.vector_scans} "
            f"broadcasts={s.broadcasts} elapsed={s.elapsed_seconds:.3f}s",
            err=True,
        )


@cli.command()
@click.argument("name")
@click.option("--json", "as_json", is_flag=True, help="Emit the report as NDJSON.")
@click.pass_context
def stats(ctx, name, as_json):
    """Compare storage sizes of the live records under the open and inferred layouts."""
    settings = ctx.obj["settings"]
    with _open(ctx, name) as dataset:
        report = build_stats_report(dataset, codec=settings.codec_name, page_size=settings.PAGE_SIZE)
    if not as_json:
        click.echo(render_table(report))
        return
    summary = report.model_dump(exclude={"encodings", "components"})
    click.echo(dumps_row({"kind": "summary", **summary}))
    for e in report.encodings:
        click.echo(dumps_row({"kind": "encoding", **e.model_dump()}))
    for c in report.components:
        click.echo(dumps_row({"kind": "component", **c.model_dump()}))


@cli.command("crash-test")
@click.argument("script_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--points", "points", multiple=True, help="Crash point name:nth (repeatable).")
@click.option("--random", "random_count", type=click.IntRange(min=0), default=0, help="Add N random crash points.")
@click.option("--keep", is_flag=True, help="Keep the per-point data directories.")
@click.pass_context
def crash_test(ctx, script_file, points, random_count, keep):
    """Run a script in child processes killed at crash points; verify recovery."""
    settings = ctx.obj["settings"]
    script = crash_harness.load_script(script_file)
    chosen = list(points) or ([] if random_count else crash_harness.default_points())
    chosen += crash_harness.pick_points(script, random_count, settings.SEED)
    work = Path(tempfile.mkdtemp(prefix="vbstore-crash-"))
    logger.info("Running %d crash points under %s", len(chosen), work)
    failures = 0
    try:
        for i, point in enumerate(chosen):
            verdict = crash_harness.run_child(script_file, script, work / f"run{i:03d}", point, settings)
            failures += not verdict.passed
            click.echo(verdict.line())
    finally:
        if not keep:
            shutil.rmtree(work, ignore_errors=True)
    click.echo(f"{len(chosen) - failures}/{len(chosen)} crash points passed")
    if failures:
        ctx.exit(1)


@cli.command("_crash-child", hidden=True)
@click.argument("name")
@click.argument("script_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--crash", "point", default=None)
@click.pass_context
def crash_child(ctx, name, script_file, point):
    crash_harness.crash_child_main(name, script_file, ctx.obj["data_dir"], point, ctx.obj["settings"],
                                   out=click.echo)


@cli.command()
@click.argument("kind", type=click.Choice(sorted(GENERATORS)))
@click.option("--count", type=click.IntRange(min=0), default=1000)
@click.option("--output", type=click.File("w", encoding="utf-8"), default="-")
@click.pass_context
def gen(ctx, kind, count, output):
    """Write a synthetic NDJSON corpus."""
    for doc in GENERATORS[kind](count, seed=ctx.obj["settings"].SEED):
        output.write(dumps_row(doc) + "\n")


@cli.command("list")
@click.pass_context
def list_datasets(ctx):
    """List datasets in the catalog."""
    with get_catalog_session(str(ctx.obj["data_dir"])) as session:
        for entry in list_datasets_from_db(session):
            click.echo(dumps_row(entry.model_dump()))


@cli.command()
@click.argument("name")
@click.pass_context
def drop(ctx, name):
    """Remove a dataset and its files."""
    drop_dataset(name, ctx.obj["data_dir"])
    click.echo(f"dropped {name}")


if __name__ == "__main__":
    cli()
