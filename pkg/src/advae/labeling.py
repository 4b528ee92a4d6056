"""Ground-truth labeling rules for synthetic faces.

Every attribute is a strict threshold on one rendered parameter, so the
labels are an exact oracle for what the classifiers should learn. The
table below is part of the dataset contract; reordering or rethresholding
it invalidates evaluation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditional import EXPRESSIONS, ConditionalVector, one_hot
from .faces import FaceParams


@dataclass(frozen=True)
class AttributeRule:
    name: str
    field: str
    op: str  # "gt" or "lt", always strict
    threshold: float

    def applies(self, params: FaceParams) -> bool:
        value = getattr(params, self.field)
        return value > self.threshold if self.op == "gt" else value < self.threshold


ATTRIBUTE_RULES = (
    AttributeRule("lipstick", "lipstick_intensity", "gt", 0.5),
    AttributeRule("bright_skin", "skin_brightness", "gt", 0.6),
    AttributeRule("bruised", "bruise_intensity", "gt", 0.3),
    AttributeRule("masculine", "jaw_sharpness", "gt", 0.6),
    AttributeRule("smiling", "mouth_curvature", "gt", 0.25),
    AttributeRule("long_hair", "hair_length", "gt", 0.5),
    AttributeRule("wide_face", "face_width", "gt", 0.85),
    AttributeRule("wide_eyes", "eye_openness", "gt", 0.7),
    AttributeRule("lowered_brows", "eyebrow_angle", "lt", -0.3),
    AttributeRule("raised_brows", "eyebrow_angle", "gt", 0.3),
    AttributeRule("dark_skin", "skin_brightness", "lt", 0.4),
    AttributeRule("light_background", "background_tone", "gt", 0.6),
)

ATTRIBUTE_NAMES = tuple(r.name for r in ATTRIBUTE_RULES)
NUM_ATTRIBUTES = len(ATTRIBUTE_RULES)
NUM_EXPRESSIONS = len(EXPRESSIONS)


def derive_expression(params: FaceParams) -> str:
    """First matching rule wins: happy, then sad, then angry, else neutral."""
    if params.mouth_curvature > 0.25:
        return "happy"
    if params.mouth_curvature < -0.25 and params.eyebrow_angle >= -0.3:
        return "sad"
    if params.eyebrow_angle < -0.3:
        return "angry"
    return "neutral"


def derive_labels(params: FaceParams) -> ConditionalVector:
    params.validate()
    attributes = np.array(
        [1.0 if rule.applies(params) else 0.0 for rule in ATTRIBUTE_RULES],
        dtype=np.float32,
    )
    expression = one_hot(EXPRESSIONS.index(derive_expression(params)), NUM_EXPRESSIONS)
    return ConditionalVector(
        attributes=attributes,
        expression=expression,
        valence=float(params.mouth_curvature),
        arousal=float(2.0 * params.eye_openness - 1.0),
    )
