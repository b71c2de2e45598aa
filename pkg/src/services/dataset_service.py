import logging
import shutil
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from src.core.config import Settings, get_catalog_session, settings as default_settings
from src.core.exceptions import DatasetNotFoundError
from src.schemas.dataset import DatasetConfig
from src.services.catalog_service import (
    delete_dataset_from_db,
    get_dataset_from_db,
    save_dataset_to_db,
)
from src.services.component import ComponentId
from src.services.lsm_engine import EngineOptions, PartitionEngine
from src.utils.keys import encode_key, extract_key, partition_of

logger = logging.getLogger(__name__)


def dataset_dir(data_dir, name: str) -> Path:
    return Path(data_dir) / "datasets" / name


def partition_dir(root: Path, index: int) -> Path:
    return root / f"p{index:03d}"


class DatasetHandle:
    """Open dataset: one LSM engine per hash partition."""

    def __init__(self, config: DatasetConfig, directory, settings: Settings = default_settings, **overrides):
        self.config = config
        self.directory = Path(directory)
        options = EngineOptions.from_settings(
            settings,
            primary_key=config.primary_key,
            declared=config.declared,
            compactor=config.tuple_compactor_enabled,
            memtable_bytes=config.memtable_bytes,
            codec=config.compression,
            merge_max_bytes=config.merge_max_bytes,
            merge_tolerable_count=config.merge_tolerable_count,
        )
        for name, value in overrides.items():
            setattr(options, name, value)
        self.options = options
        self.partitions: List[PartitionEngine] = []
        try:
            for i in range(config.partitions):
                self.partitions.append(PartitionEngine(partition_dir(self.directory, i), options))
        except Exception:
            self.close()
            raise

    def partition_for(self, key: Any) -> PartitionEngine:
        return self.partitions[partition_of(encode_key(key), len(self.partitions))]

    def insert(self, doc: Any, strict: bool = True) -> int:
        key = extract_key(doc, self.config.primary_key)
        return self.partition_for(key).insert(doc, strict=strict)

    def upsert(self, doc: Any) -> int:
        key = extract_key(doc, self.config.primary_key)
        return self.partition_for(key).upsert(doc)

    def delete(self, key: Any) -> int:
        return self.partition_for(key).delete(key)

    def point_lookup(self, key: Any) -> Optional[Any]:
        return self.partition_for(key).point_lookup(key)

    def bulk_load(self, docs: Iterable[Any]) -> List[Optional[ComponentId]]:
        """Route the batch to partitions and build one component in each."""
        routed: Dict[int, List[Any]] = defaultdict(list)
        for doc in docs:
            key = extract_key(doc, self.config.primary_key)
            routed[partition_of(encode_key(key), len(self.partitions))].append(doc)
        return [engine.bulk_load(routed.get(i, [])) for i, engine in enumerate(self.partitions)]

    def flush(self) -> List[Optional[ComponentId]]:
        return [engine.flush() for engine in self.partitions]

    def live_count(self) -> int:
        return sum(engine.live_count() for engine in self.partitions)

    def close(self) -> None:
        for engine in self.partitions:
            engine.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_dataset(config: DatasetConfig, data_dir) -> Path:
    """
    Register a dataset in the catalog and create its partition directories.

    Args:
        config (DatasetConfig): Validated dataset definition.
        data_dir: Root data directory.

    Returns:
        Path: Directory of the new dataset.
    """
    with get_catalog_session(str(data_dir)) as session:
        save_dataset_to_db(config, session)
    root = dataset_dir(data_dir, config.name)
    for i in range(config.partitions):
        partition_dir(root, i).mkdir(parents=True, exist_ok=True)
    logger.info("Created dataset %s with %d partitions", config.name, config.partitions)
    return root


def load_dataset_config(name: str, data_dir) -> DatasetConfig:
    with get_catalog_session(str(data_dir)) as session:
        return get_dataset_from_db(name, session)


def open_dataset(name: str, data_dir, settings: Settings = default_settings, **overrides) -> DatasetHandle:
    """Open (and recover) a dataset registered in the catalog."""
    config = load_dataset_config(name, data_dir)
    root = dataset_dir(data_dir, name)
    if not root.exists():
        raise DatasetNotFoundError(f"dataset {name!r} has no directory under {data_dir}")
    return DatasetHandle(config, root, settings, **overrides)


def drop_dataset(name: str, data_dir) -> None:
    with get_catalog_session(str(data_dir)) as session:
        delete_dataset_from_db(name, session)
    shutil.rmtree(dataset_dir(data_dir, name), ignore_errors=True)
    logger.info("Dropped dataset %s", name)
