"""
Named crash points for fault-injection runs.

A crash point is armed with ``name:nth``: the nth time execution reaches ``name``
the process dies (``exit`` mode, used by the crash-test child) or
``SimulatedCrash`` is raised (``raise`` mode, used by in-process tests).
"""
import logging
import os
import sys
import threading
from collections import Counter
from typing import Dict, Optional

from src.core.exceptions import SimulatedCrash

logger = logging.getLogger(__name__)

CRASH_EXIT_CODE = 86

CRASH_POINTS = (
    "wal.after_append",
    "flush.after_data",
    "flush.before_validity",
    "flush.after_validity",
    "merge.before_validity",
    "merge.after_validity",
)

_lock = threading.Lock()
_hits: Counter = Counter()
_armed: Optional[tuple] = None
_mode = "exit"


def arm(spec: Optional[str], mode: str = "exit") -> None:
    """Arm a single crash point given as ``name:nth`` (``nth`` defaults to 1)."""
    global _armed, _mode
    with _lock:
        _hits.clear()
        _mode = mode
        if not spec:
            _armed = None
            return
        name, _, nth = spec.partition(":")
        if name not in CRASH_POINTS:
            raise ValueError(f"unknown crash point {name!r}")
        _armed = (name, int(nth) if nth else 1)
    logger.info("Crash point armed: %s (mode=%s)", spec, mode)


def disarm() -> None:
    arm(None)


def hits() -> Dict[str, int]:
    with _lock:
        return dict(_hits)


def crash_point(name: str) -> None:
    with _lock:
        _hits[name] += 1
        fire = _armed is not None and _armed[0] == name and _hits[name] == _armed[1]
    if not fire:
        return
    logger.warning("Crash point %s reached (hit %d)", name, _hits[name])
    if _mode == "raise":
        raise SimulatedCrash(name)
    sys.stdout.flush()
    sys.stderr.flush()
    os._exit(CRASH_EXIT_CODE)
