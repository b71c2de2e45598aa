"""
Fault-injection harness.

A crash script is NDJSON: an optional ``{"config": {...}}`` line with dataset
settings, then one operation per line::

    {"op": "insert", "doc": {...}}   {"op": "upsert", "doc": {...}}
    {"op": "delete", "key": 7}       {"op": "flush"}       {"op": "merge"}

Each run arms one crash point, executes the script until the process dies (or the
point raises in-process), recovers the dataset and compares its live documents
with a sequential replay of the acknowledged prefix. The operation in flight at
the crash may or may not have survived; both outcomes pass.
"""
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from src.core import faults
from src.core.config import Settings, settings as default_settings
from src.core.exceptions import DuplicateKeyError, SimulatedCrash
from src.schemas.dataset import DatasetConfig
from src.services.dataset_service import DatasetHandle, create_dataset, open_dataset
from src.services.vb_record import decode
from src.utils.jsonio import read_ndjson
from src.utils.keys import decode_key

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[2]
ACK_PREFIX = "ACK "
DEFAULT_SCRIPT_CONFIG = {
    "name": "crash",
    "primary_key": "id",
    "partitions": 1,
    "memtable_bytes": 4096,
    "merge_tolerable_count": 3,
}


class CrashEnvironmentError(RuntimeError):
    """The child process failed for a reason other than the armed crash."""


@dataclass
class CrashScript:
    config: DatasetConfig
    ops: List[Dict[str, Any]]


@dataclass
class CrashVerdict:
    point: str
    passed: bool
    crashed: bool
    acked: int
    detail: str

    def line(self) -> str:
        state = "crashed" if self.crashed else "not reached"
        return f"{'PASS' if self.passed else 'FAIL'} {self.point} ({state}, {self.acked} acked): {self.detail}"


def load_script(path) -> CrashScript:
    config = dict(DEFAULT_SCRIPT_CONFIG)
    ops = []
    with open(path, encoding="utf-8") as f:
        for number, value in read_ndjson(f):
            if isinstance(value, dict) and "config" in value and not ops:
                config.update(value["config"])
                continue
            if not isinstance(value, dict) or value.get("op") not in ("insert", "upsert", "delete", "flush", "merge"):
                raise ValueError(f"line {number}: not a script operation")
            ops.append(value)
    return CrashScript(DatasetConfig(**config), ops)


def apply_op(dataset: DatasetHandle, op: Dict[str, Any]) -> None:
    kind = op["op"]
    if kind == "insert":
        try:
            dataset.insert(op["doc"], strict=True)
        except DuplicateKeyError:
            logger.debug("Script insert of a live key rejected")
    elif kind == "upsert":
        dataset.upsert(op["doc"])
    elif kind == "delete":
        dataset.delete(op["key"])
    elif kind == "flush":
        dataset.flush()
    else:
        for engine in dataset.partitions:
            engine.maybe_merge()


def replay_ops(ops: List[Dict[str, Any]], primary_key: str) -> Dict[Any, Any]:
    """Sequential map semantics of a script prefix."""
    state: Dict[Any, Any] = {}
    for op in ops:
        if op["op"] == "insert":
            state.setdefault(op["doc"][primary_key], op["doc"])
        elif op["op"] == "upsert":
            state[op["doc"][primary_key]] = op["doc"]
        elif op["op"] == "delete":
            state.pop(op["key"], None)
    return state


def dataset_state(dataset: DatasetHandle) -> Dict[Any, Any]:
    declared = dataset.config.declared
    state = {}
    for engine in dataset.partitions:
        for item in engine.scan():
            state[decode_key(item.key)] = decode(item.record, item.schema, declared)
    return state


def judge(point: str, state: Dict[Any, Any], script: CrashScript, acked: int, crashed: bool) -> CrashVerdict:
    pk = script.config.primary_key
    if state == replay_ops(script.ops[:acked], pk):
        return CrashVerdict(point, True, crashed, acked, "state equals the acknowledged prefix")
    if acked < len(script.ops) and state == replay_ops(script.ops[:acked + 1], pk):
        return CrashVerdict(point, True, crashed, acked, "state includes the in-flight operation")
    expected = replay_ops(script.ops[:acked], pk)
    missing = sorted(map(str, set(expected) - set(state)))[:5]
    extra = sorted(map(str, set(state) - set(expected)))[:5]
    return CrashVerdict(point, False, crashed, acked, f"state diverges (missing {missing}, unexpected {extra})")


def _recovered_state(script: CrashScript, data_dir, settings: Settings) -> Dict[Any, Any]:
    with open_dataset(script.config.name, data_dir, settings) as dataset:
        return dataset_state(dataset)


def run_in_process(script: CrashScript, data_dir, point: str, settings: Settings = default_settings) -> CrashVerdict:
    """
    Run a script with ``point`` armed in raise mode, then recover and judge.

    Args:
        script (CrashScript): Operations and dataset settings.
        data_dir: Fresh data directory for this run.
        point (str): Crash point spec ``name:nth``.
        settings (Settings): Engine settings.

    Returns:
        CrashVerdict: Outcome for this crash point.
    """
    create_dataset(script.config, data_dir)
    acked = 0
    crashed = False
    dataset = open_dataset(script.config.name, data_dir, settings)
    faults.arm(point, mode="raise")
    try:
        for op in script.ops:
            apply_op(dataset, op)
            acked += 1
    except SimulatedCrash:
        crashed = True
    finally:
        faults.disarm()
    if not crashed:
        dataset.close()
    return judge(point, _recovered_state(script, data_dir, settings), script, acked, crashed)


def run_child(script_path, script: CrashScript, data_dir, point: str, settings: Settings = default_settings,
              timeout: float = 600.0) -> CrashVerdict:
    """Run a script in a child process that exits at ``point``, then recover and judge."""
    create_dataset(script.config, data_dir)
    env = dict(os.environ)
    env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(PROJECT_ROOT), env.get("PYTHONPATH")]))
    cmd = [
        sys.executable, "-m", "src.main", "--data-dir", str(data_dir),
        "_crash-child", script.config.name, str(script_path), "--crash", point,
    ]
    try:
        child = subprocess.run(cmd, capture_output=True, text=True, cwd=PROJECT_ROOT, env=env, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as e:
        raise CrashEnvironmentError(f"child for {point} did not run: {e}") from e
    if child.returncode not in (0, faults.CRASH_EXIT_CODE):
        raise CrashEnvironmentError(
            f"child for {point} exited with {child.returncode}: {child.stderr.strip()[-500:]}"
        )
    acked = sum(1 for line in child.stdout.splitlines() if line.startswith(ACK_PREFIX))
    crashed = child.returncode == faults.CRASH_EXIT_CODE
    return judge(point, _recovered_state(script, data_dir, settings), script, acked, crashed)


def crash_child_main(name: str, script_path, data_dir, point: Optional[str], settings: Settings = default_settings,
                     out: Callable[[str], None] = print) -> None:
    """Body of the child process: run the script, acknowledging each operation."""
    script = load_script(script_path)
    faults.arm(point, mode="exit")
    with open_dataset(name, data_dir, settings) as dataset:
        for index, op in enumerate(script.ops):
            apply_op(dataset, op)
            out(f"{ACK_PREFIX}{index}")
            sys.stdout.flush()


def pick_points(script: CrashScript, count: int, seed: int) -> List[str]:
    """Random crash point specs scaled to the script's length."""
    rng = np.random.default_rng(seed)
    writes = max(1, sum(1 for op in script.ops if op["op"] in ("insert", "upsert", "delete")))
    points = []
    for _ in range(count):
        name = faults.CRASH_POINTS[int(rng.integers(0, len(faults.CRASH_POINTS)))]
        bound = writes if name == "wal.after_append" else max(1, writes // 8)
        points.append(f"{name}:{int(rng.integers(1, bound + 1))}")
    return points


def default_points() -> List[str]:
    return [f"{name}:{nth}" for name in faults.CRASH_POINTS for nth in (1, 2)]
