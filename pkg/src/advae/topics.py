"""Per-topic face parameter distributions.

Each topic draws every FaceParams field from a Gaussian centered on the
topic's mean (data/topic_means.json), std shared across fields, clamped
to the field's range. The means table is a versioned artifact: changing
it changes every downstream baseline.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .errors import ConfigurationError, DomainError
from .faces import FIELD_RANGES, FaceParams

_TOPIC_TABLE = None


def topic_table() -> dict:
    global _TOPIC_TABLE
    if _TOPIC_TABLE is None:
        text = resources.files("advae").joinpath("data/topic_means.json").read_text("utf-8")
        table = json.loads(text)
        if table.get("format") != "advae-topics/1":
            raise ConfigurationError(f"unsupported topic table format {table.get('format')!r}")
        _TOPIC_TABLE = table
    return _TOPIC_TABLE


def default_topics() -> tuple[str, ...]:
    return tuple(sorted(topic_table()["topics"]))


def topic_means(topic: str) -> dict[str, float]:
    table = topic_table()
    if topic not in table["topics"]:
        raise DomainError(f"unknown topic {topic!r}; known: {sorted(table['topics'])}")
    means = dict(table["defaults"])
    means.update(table["topics"][topic])
    return means


def sample_topic_params(topic: str, rng_seed: int) -> FaceParams:
    """Draw one FaceParams from the topic's clamped-Gaussian distribution."""
    means = topic_means(topic)
    std = topic_table()["std"]
    rng = np.random.default_rng(rng_seed)
    values = {}
    for field, (lo, hi) in FIELD_RANGES.items():
        values[field] = float(np.clip(rng.normal(means[field], std), lo, hi))
    return FaceParams(**values)
