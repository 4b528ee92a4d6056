"""Procedural face renderer.

Faces are drawn from ten scalar parameters as flat-shaded geometry on a
unit-square coordinate grid (u right, v down). Rendering is a pure
function of (params, size): no RNG, no global state.

REGIONS declares, per feature layer, the bounding box (fractions of the
image side, row0/row1/col0/col1) that the layer is guaranteed to stay
inside. Tests and downstream tooling rely on these boxes: a parameter
that only feeds one layer may only change pixels inside that layer's box.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError

FIELD_RANGES = {
    "skin_brightness": (0.0, 1.0),
    "mouth_curvature": (-1.0, 1.0),
    "lipstick_intensity": (0.0, 1.0),
    "eyebrow_angle": (-1.0, 1.0),
    "eye_openness": (0.0, 1.0),
    "hair_length": (0.0, 1.0),
    "face_width": (0.6, 1.0),
    "jaw_sharpness": (0.0, 1.0),
    "background_tone": (0.0, 1.0),
    "bruise_intensity": (0.0, 1.0),
}

# Per-layer bounding boxes (row0, row1, col0, col1) as fractions of size.
REGIONS = {
    "mouth": (0.58, 0.86, 0.27, 0.73),
    "eyes": (0.33, 0.52, 0.22, 0.78),
    "brows": (0.24, 0.42, 0.20, 0.80),
    "bruise": (0.44, 0.66, 0.52, 0.80),
}


@dataclass
class FaceParams:
    skin_brightness: float
    mouth_curvature: float
    lipstick_intensity: float
    eyebrow_angle: float
    eye_openness: float
    hair_length: float
    face_width: float
    jaw_sharpness: float
    background_tone: float
    bruise_intensity: float

    def validate(self) -> None:
        for f in fields(self):
            lo, hi = FIELD_RANGES[f.name]
            v = getattr(self, f.name)
            if not lo <= v <= hi:
                raise ConfigurationError(f"{f.name}={v} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @classmethod
    def midpoint(cls) -> "FaceParams":
        return cls(**{k: (lo + hi) / 2 for k, (lo, hi) in FIELD_RANGES.items()})


def _segment_mask(u, v, p0, p1, half_width):
    """Pixels within half_width of the segment p0-p1."""
    du, dv = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = du * du + dv * dv
    t = ((u - p0[0]) * du + (v - p0[1]) * dv) / norm2
    t = np.clip(t, 0.0, 1.0)
    dist2 = (u - (p0[0] + t * du)) ** 2 + (v - (p0[1] + t * dv)) ** 2
    return dist2 <= half_width * half_width


def _paint(img, mask, color):
    for c in range(3):
        img[c][mask] = color[c]


def _blend(img, mask, color, alpha):
    for c in range(3):
        img[c][mask] = (1.0 - alpha) * img[c][mask] + alpha * color[c]


def render_face(params: FaceParams, size: int) -> np.ndarray:
    """Render params to a (3, size, size) float32 image with values in [0, 1]."""
    if size < 32 or size % 2 != 0:
        raise ConfigurationError(f"size must be even and >= 32, got {size}")
    params.validate()
    p = params

    axis = (np.arange(size, dtype=np.float64) + 0.5) / size
    u, v = np.meshgrid(axis, axis, indexing="xy")  # u: col coord, v: row coord

    img = np.empty((3, size, size), dtype=np.float64)
    bg = p.background_tone
    _paint(img, np.ones_like(u, dtype=bool), (0.92 * bg + 0.04, 0.92 * bg + 0.05, 0.92 * bg + 0.08))

    # Face: ellipse with the lower half laterally squeezed by jaw sharpness.
    cx, cy = 0.5, 0.52
    semi_x = 0.34 * p.face_width
    semi_y = 0.36
    below = np.clip((v - cy) / semi_y, 0.0, 1.0)
    squeeze = 1.0 - 0.45 * p.jaw_sharpness * below**2
    face = ((u - cx) / (semi_x * squeeze)) ** 2 + ((v - cy) / semi_y) ** 2 <= 1.0
    b = p.skin_brightness
    skin = (0.30 + 0.62 * b, 0.22 + 0.58 * b, 0.16 + 0.50 * b)
    _paint(img, face, skin)

    # Hair: ring between the face ellipse and a larger one, cut off at a
    # depth set by hair_length, plus a fixed fringe over the forehead.
    hair_col = (0.13, 0.09, 0.07)
    ring = ((u - cx) / (semi_x * 1.20)) ** 2 + ((v - (cy - 0.03)) / (semi_y * 1.16)) ** 2 <= 1.0
    hair_bottom = 0.30 + 0.55 * p.hair_length
    _paint(img, ring & ~face & (v < hair_bottom), hair_col)
    _paint(img, face & (v < 0.24), hair_col)

    # Bruise on the right cheek, alpha-blended over the skin.
    if p.bruise_intensity > 0.0:
        bruise = ((u - 0.645) / 0.055) ** 2 + ((v - 0.545) / 0.042) ** 2 <= 1.0
        _blend(img, bruise & face, (0.33, 0.18, 0.42), 0.85 * p.bruise_intensity)

    # Eyes: whites shrink vertically as openness drops; pupils vanish when
    # the eye is nearly shut.
    eye_dx = 0.14 * p.face_width
    eye_y = 0.425
    eye_h = 0.010 + 0.038 * p.eye_openness
    for sx in (-1.0, 1.0):
        ex = cx + sx * eye_dx
        white = ((u - ex) / 0.05) ** 2 + ((v - eye_y) / eye_h) ** 2 <= 1.0
        _paint(img, white, (0.93, 0.93, 0.90))
        if p.eye_openness > 0.12:
            pupil = (u - ex) ** 2 + (v - eye_y) ** 2 <= 0.016**2
            _paint(img, pupil & white, (0.08, 0.05, 0.04))

    # Eyebrows: thick segments; negative angle lowers the inner ends.
    tilt = 0.09 * p.eyebrow_angle
    brow_y = 0.345
    for sx in (-1.0, 1.0):
        inner = (cx + sx * 0.055, brow_y + tilt * 0.5)
        outer = (cx + sx * 0.185, brow_y - tilt * 0.5)
        _paint(img, _segment_mask(u, v, inner, outer, 0.014), (0.10, 0.07, 0.05))

    # Mouth: parabolic band; curvature bends it, lipstick thickens and
    # reddens it. Geometry is bounded inside REGIONS["mouth"].
    mw = 0.13 * p.face_width
    du_m = u - cx
    rel = du_m / mw
    center_v = 0.705 - 0.055 * p.mouth_curvature * (rel**2 - 0.5)
    half_t = (0.018 + 0.016 * p.lipstick_intensity) * (1.0 - 0.6 * rel**2)
    mouth = (np.abs(rel) <= 1.0) & (np.abs(v - center_v) <= half_t)
    li = p.lipstick_intensity
    lip = (
        0.62 + (0.82 - 0.62) * li,
        0.34 + (0.08 - 0.34) * li,
        0.32 + (0.16 - 0.32) * li,
    )
    _paint(img, mouth, lip)

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def region_slices(name: str, size: int) -> tuple[slice, slice]:
    """Row/col slices of a declared region box at a given image size."""
    r0, r1, c0, c1 = REGIONS[name]
    return (
        slice(int(np.floor(r0 * size)), int(np.ceil(r1 * size))),
        slice(int(np.floor(c0 * size)), int(np.ceil(c1 * size))),
    )
