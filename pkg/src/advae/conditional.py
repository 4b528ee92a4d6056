"""Conditional vector: binarized attributes + one-hot expression + valence/arousal.

Flattened layout (length A + E + 2, in this order):

    [attributes (A) | expression one-hot (E) | valence | arousal]

Everything downstream (decoder input, topic vectors, manifests) relies on
this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError

# Canonical expression slots. The synthetic labeler only ever emits the
# first four; the remaining slots exist so the paper-sized 8-way layout
# stays exercisable.
EXPRESSIONS = (
    "neutral",
    "happy",
    "sad",
    "angry",
    "surprise",
    "fear",
    "disgust",
    "contempt",
)


@dataclass(eq=False)
class ConditionalVector:
    attributes: np.ndarray  # (A,) values in {0, 1}
    expression: np.ndarray  # (E,) one-hot
    valence: float
    arousal: float

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float32)
        self.expression = np.asarray(self.expression, dtype=np.float32)

    def validate(self) -> None:
        if not np.all((self.attributes == 0.0) | (self.attributes == 1.0)):
            raise ConfigurationError("attributes must be exactly 0 or 1")
        one = np.isclose(self.expression, 1.0)
        zero = np.isclose(self.expression, 0.0)
        if one.sum() != 1 or not np.all(one | zero):
            raise ConfigurationError("expression must be one-hot")
        for name, v in (("valence", self.valence), ("arousal", self.arousal)):
            if not -1.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} outside [-1, 1]")

    @property
    def num_attributes(self) -> int:
        return int(self.attributes.shape[0])

    @property
    def num_expressions(self) -> int:
        return int(self.expression.shape[0])

    @property
    def length(self) -> int:
        return self.num_attributes + self.num_expressions + 2

    @property
    def expression_index(self) -> int:
        return int(np.argmax(self.expression))

    def expression_name(self, names=EXPRESSIONS) -> str:
        return names[self.expression_index]

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            [
                self.attributes,
                self.expression,
                np.array([self.valence, self.arousal], dtype=np.float32),
            ]
        ).astype(np.float32)

    @classmethod
    def from_array(cls, arr, num_attributes: int, num_expressions: int) -> "ConditionalVector":
        arr = np.asarray(arr, dtype=np.float32).reshape(-1)
        expected = num_attributes + num_expressions + 2
        if arr.shape[0] != expected:
            raise ConfigurationError(
                f"conditional vector length {arr.shape[0]}, expected {expected}"
            )
        a, e = num_attributes, num_expressions
        return cls(
            attributes=arr[:a].copy(),
            expression=arr[a : a + e].copy(),
            valence=float(arr[a + e]),
            arousal=float(arr[a + e + 1]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConditionalVector):
            return NotImplemented
        return (
            np.array_equal(self.attributes, other.attributes)
            and np.array_equal(self.expression, other.expression)
            and self.valence == other.valence
            and self.arousal == other.arousal
        )

    def to_json_dict(self, expression_names=EXPRESSIONS) -> dict:
        return {
            "attributes": [int(a) for a in self.attributes],
            "expression": expression_names[self.expression_index],
            "valence": float(self.valence),
            "arousal": float(self.arousal),
        }

    @classmethod
    def from_json_dict(cls, d: dict, expression_names=EXPRESSIONS) -> "ConditionalVector":
        expr = np.zeros(len(expression_names), dtype=np.float32)
        try:
            expr[expression_names.index(d["expression"])] = 1.0
        except ValueError:
            raise ConfigurationError(f"unknown expression {d['expression']!r}") from None
        return cls(
            attributes=np.array(d["attributes"], dtype=np.float32),
            expression=expr,
            valence=float(d["valence"]),
            arousal=float(d["arousal"]),
        )


def one_hot(index: int, length: int) -> np.ndarray:
    if not 0 <= index < length:
        raise ShapeError(f"one-hot index {index} outside [0, {length})")
    v = np.zeros(length, dtype=np.float32)
    v[index] = 1.0
    return v
