"""Conditional VAE pipeline for topic-signature face transformation."""

__version__ = "0.1.0"

from .conditional import EXPRESSIONS, ConditionalVector
from .faces import FaceParams, render_face
from .labeling import ATTRIBUTE_NAMES, derive_labels

__all__ = [
    "ConditionalVector",
    "EXPRESSIONS",
    "ATTRIBUTE_NAMES",
    "FaceParams",
    "render_face",
    "derive_labels",
    "__version__",
]
