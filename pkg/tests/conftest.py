import os

import pytest
from hypothesis import strategies as st

from src.core import faults
from src.core.config import Settings
from src.core.types import DeclaredKeySpec
from src.schemas.dataset import DatasetConfig
from src.services.dataset_service import create_dataset, open_dataset
from src.services.lsm_engine import EngineOptions, PartitionEngine

SAMPLE_DOC = {"id": 1, "name": "Ann", "salaries": [70000, 90000], "age": 26}

EMPLOYEE_DOC = {
    "id": 1,
    "name": "Ann",
    "dependents": [{"name": "Bob", "age": 6}, {"name": "Carol", "age": 10}],
    "employment_date": "2018-09-20",
    "branch_location": "POINT(24.0 -56.12)",
    "working_shifts": [[8, 16], [9, 17], [10, 18], "on_call"],
}

DEPENDENTS_DOC = {
    "id": 1,
    "name": "Ann",
    "dependents": [{"name": "Bob", "age": 6}, {"name": "Carol", "age": 10}, "Dan"],
    "employment_date": "2018-09-20",
    "branch_location": "POINT(24.0 -56.12)",
}

ID_ONLY = DeclaredKeySpec.of("id")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("VBSTORE_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set VBSTORE_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _disarm_crash_points():
    faults.disarm()
    yield
    faults.disarm()


@pytest.fixture
def settings(tmp_path):
    return Settings(
        DATA_DIR=str(tmp_path / "data"),
        PAGE_SIZE=4096,
        LAF_PAGE_SIZE=4096,
        WAL_FSYNC=False,
        EXCHANGE_QUEUE_SIZE=16,
    )


@pytest.fixture
def engine_factory(tmp_path):
    """Build (and later close) partition engines over directories under tmp_path."""
    opened = []

    def make(name="p0", **overrides):
        values = dict(
            primary_key="id",
            declared=ID_ONLY,
            memtable_bytes=1 << 20,
            page_size=4096,
            laf_page_size=4096,
            auto_merge=False,
            wal_fsync=False,
        )
        values.update(overrides)
        engine = PartitionEngine(tmp_path / name, EngineOptions(**values))
        opened.append(engine)
        return engine

    yield make
    for engine in opened:
        engine.close()


@pytest.fixture
def dataset_factory(settings):
    """Create and open datasets in the settings' data directory."""
    opened = []

    def make(name="ds", **config):
        values = dict(name=name, primary_key="id", partitions=1, memtable_bytes=1 << 20)
        values.update(config)
        create_dataset(DatasetConfig(**values), settings.DATA_DIR)
        handle = open_dataset(name, settings.DATA_DIR, settings, auto_merge=False)
        opened.append(handle)
        return handle

    yield make
    for handle in opened:
        handle.close()


_names = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12
).filter(lambda s: len(s.encode("utf-8")) <= 64)

_scalars = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(1 << 63), max_value=(1 << 63) - 1),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40),
)

json_values = st.recursive(
    _scalars,
    lambda children: st.one_of(
        st.lists(children, max_size=5),
        st.dictionaries(_names, children, max_size=5),
    ),
    max_leaves=30,
)

json_docs = st.dictionaries(_names.filter(lambda n: n != "id"), json_values, max_size=6)
