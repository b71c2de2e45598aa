"""Synthetic NDJSON corpora shaped like tweets, publications and sensor reports."""
import logging
from typing import Any, Callable, Dict, Iterator

import numpy as np

logger = logging.getLogger(__name__)

_WORDS = (
    "storage", "schema", "record", "merge", "flush", "query", "vector", "page", "tree", "index",
    "json", "field", "union", "array", "object", "string", "value", "node", "cluster", "sensor",
)
_HASHTAGS = ("lsm", "nosql", "json", "bigdata", "db", "storage", "python", "cloud")
_LANGS = ("en", "es", "fr", "de", "ja")
_VENUES = ("VLDB", "SIGMOD", "ICDE", "EDBT", "CIDR")
_COUNTRIES = ("US", "DE", "JP", "BR", "IN")


def _sentence(rng: np.random.Generator, low: int, high: int) -> str:
    count = int(rng.integers(low, high))
    return " ".join(_WORDS[int(i)] for i in rng.integers(0, len(_WORDS), count))


def gen_tweets(count: int, seed: int = 42) -> Iterator[Dict[str, Any]]:
    rng = np.random.default_rng(seed)
    users = max(1, count // 10)
    for i in range(count):
        user = int(rng.integers(0, users))
        tags = [
            {"text": _HASHTAGS[int(t)], "indices": [int(s), int(s) + 5]}
            for t, s in zip(rng.integers(0, len(_HASHTAGS), int(rng.integers(0, 4))), rng.integers(0, 100, 4))
        ]
        tweet = {
            "id": i,
            "created_at": int(1_600_000_000 + i * 37),
            "text": _sentence(rng, 4, 16),
            "lang": _LANGS[int(rng.integers(0, len(_LANGS)))],
            "retweet_count": int(rng.integers(0, 500)),
            "user": {
                "id": user,
                "name": f"user_{user}",
                "followers_count": int(rng.integers(0, 10_000)),
                "verified": bool(rng.random() < 0.05),
            },
            "entities": {"hashtags": tags},
        }
        if rng.random() < 0.1:
            tweet["place"] = {"country": _COUNTRIES[int(rng.integers(0, len(_COUNTRIES)))]}
        yield tweet


def _author(rng: np.random.Generator) -> Dict[str, Any]:
    n = int(rng.integers(0, 500))
    return {"name": f"author_{n}", "affiliation": f"lab_{n % 37}"}


def gen_publications(count: int, seed: int = 42) -> Iterator[Dict[str, Any]]:
    """Publications whose ``authors`` is an object or an array of objects."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        n_authors = int(rng.integers(1, 6))
        authors = _author(rng) if n_authors == 1 else [_author(rng) for _ in range(n_authors)]
        yield {
            "id": i,
            "title": _sentence(rng, 3, 10),
            "year": int(rng.integers(1990, 2024)),
            "venue": _VENUES[int(rng.integers(0, len(_VENUES)))],
            "authors": authors,
            "keywords": [_WORDS[int(k)] for k in rng.integers(0, len(_WORDS), int(rng.integers(0, 5)))],
            "citations": int(rng.integers(0, 1000)),
        }


def gen_sensors(count: int, seed: int = 42, readings: int = 60) -> Iterator[Dict[str, Any]]:
    """Sensor reports, each with an array of ``readings`` objects."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        start = int(1_700_000_000 + i * 600)
        values = rng.normal(20.0, 5.0, readings)
        yield {
            "id": i,
            "sensor_id": int(rng.integers(0, 1000)),
            "report_time": start + readings * 10,
            "status": {
                "battery_level": float(round(rng.random() * 100, 2)),
                "signal_strength": int(rng.integers(-90, -30)),
                "firmware_version": f"v{int(rng.integers(1, 4))}.{int(rng.integers(0, 10))}",
            },
            "readings": [
                {"reading_value": float(v), "reading_timestamp": start + k * 10}
                for k, v in enumerate(values)
            ],
        }


GENERATORS: Dict[str, Callable[..., Iterator[Dict[str, Any]]]] = {
    "tweets": gen_tweets,
    "publications": gen_publications,
    "sensors": gen_sensors,
}
