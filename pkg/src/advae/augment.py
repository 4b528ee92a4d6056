"""Training-time augmentation: random horizontal flip, random zoom, crop.

Zoom-out leaves a margin which is filled by edge replication rather than
black padding, so border color never becomes a topic cue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ShapeError


@dataclass
class AugmentConfig:
    train_size: int = 64
    zoom_range: tuple[float, float] = (0.85, 1.15)
    flip_prob: float = 0.5


def _resize(image: np.ndarray, new_size: int) -> np.ndarray:
    channels = [
        np.asarray(
            Image.fromarray(ch.astype(np.float32), mode="F").resize(
                (new_size, new_size), Image.BILINEAR
            )
        )
        for ch in image
    ]
    return np.stack(channels)


def augment(image: np.ndarray, rng_seed: int, config: AugmentConfig) -> np.ndarray:
    """Return a (3, train_size, train_size) float32 view of the image in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"expected (3, S, S) image, got {image.shape}")
    rng = np.random.default_rng(rng_seed)
    # Both draws always happen so the RNG schedule is independent of outcomes.
    flip = rng.random() < config.flip_prob
    zoom = rng.uniform(*config.zoom_range)

    out = image[:, :, ::-1] if flip else image
    size = out.shape[1]
    new_size = max(1, round(size * zoom))
    if new_size != size:
        out = _resize(out, new_size)

    train = config.train_size
    if new_size >= train:
        off = (new_size - train) // 2
        out = out[:, off : off + train, off : off + train]
    else:
        lo = (train - new_size) // 2
        hi = train - new_size - lo
        out = np.pad(out, ((0, 0), (lo, hi), (lo, hi)), mode="edge")
    return np.clip(np.ascontiguousarray(out, dtype=np.float32), 0.0, 1.0)
