"""Per-topic transformation vectors in embedding space.

v_t = (mean embedding of topic-t faces) - (mean embedding of all other
faces), computed with epsilon=0 so the latent segment is the encoder
mean. Scaling amplifies the conditional and latent segments separately
before the vector is added to an embedding and decoded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditional import ConditionalVector
from .cvae import CvaeModel, decode_batch, encode_batch
from .dataset import DatasetManifest
from .errors import ArtifactError, DomainError, ShapeError
from .util import canonical_json

VECTORS_FORMAT = "advae-topic-vectors/1"


@dataclass
class TopicVector:
    topic: str
    conditional_part: np.ndarray
    latent_part: np.ndarray

    def validate(self) -> None:
        if self.conditional_part.ndim != 1 or self.latent_part.ndim != 1:
            raise ShapeError("topic vector segments must be vectors")
        if not (np.isfinite(self.conditional_part).all() and np.isfinite(self.latent_part).all()):
            raise DomainError(f"topic vector for {self.topic!r} has non-finite entries")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.conditional_part, self.latent_part])


@dataclass
class TopicVectorSet:
    vectors: dict[str, TopicVector]
    provenance: dict

    def __getitem__(self, topic: str) -> TopicVector:
        if topic not in self.vectors:
            raise DomainError(f"no topic vector for {topic!r}; have {sorted(self.vectors)}")
        return self.vectors[topic]

    @property
    def topics(self) -> list[str]:
        return sorted(self.vectors)

    def to_json_dict(self) -> dict:
        return {
            "format": VECTORS_FORMAT,
            "topics": {
                t: {
                    "conditional": [float(x) for x in v.conditional_part],
                    "latent": [float(x) for x in v.latent_part],
                }
                for t, v in sorted(self.vectors.items())
            },
            "provenance": self.provenance,
        }

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        try:
            path.write_text(canonical_json(self.to_json_dict()) + "\n", encoding="utf-8")
        except OSError as e:
            raise ArtifactError(f"cannot write topic vectors {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Path | str) -> "TopicVectorSet":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ArtifactError(f"cannot read topic vectors {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ArtifactError(f"corrupt topic vector file {path}: {e}") from e
        if d.get("format") != VECTORS_FORMAT:
            raise ArtifactError(f"{path}: unsupported format {d.get('format')!r}")
        vectors = {
            t: TopicVector(
                topic=t,
                conditional_part=np.asarray(seg["conditional"], dtype=np.float64),
                latent_part=np.asarray(seg["latent"], dtype=np.float64),
            )
            for t, seg in d["topics"].items()
        }
        return cls(vectors=vectors, provenance=d.get("provenance", {}))


def manifest_embeddings(model: CvaeModel, manifest: DatasetManifest, chunk: int = 128) -> np.ndarray:
    """Embedding rows [conditional | mu] for every record, float64."""
    rows = []
    records = manifest.records
    for start in range(0, len(records), chunk):
        block = records[start : start + chunk]
        images = np.stack([manifest.load_image(r) for r in block])
        mu, _ = encode_batch(model, images)
        cond = np.stack([manifest.model_labels(r).to_array() for r in block])
        rows.append(np.concatenate([cond, mu], axis=1).astype(np.float64))
    if not rows:
        return np.zeros((0, model.config.embedding_length), dtype=np.float64)
    return np.concatenate(rows, axis=0)


def compute_topic_vectors(
    model: CvaeModel, manifest: DatasetManifest, provenance: dict | None = None
) -> TopicVectorSet:
    topics = list(manifest.config.topics)
    topic_of = np.array([r.topic for r in manifest.records])
    emb = manifest_embeddings(model, manifest)
    c = model.config.conditional_length
    vectors = {}
    for t in topics:
        mask = topic_of == t
        if not mask.any():
            raise DomainError(f"topic {t!r} has no faces in the manifest")
        if mask.all():
            raise DomainError(f"topic {t!r} has no complement faces to difference against")
        v = emb[mask].mean(axis=0) - emb[~mask].mean(axis=0)
        vec = TopicVector(topic=t, conditional_part=v[:c], latent_part=v[c:])
        vec.validate()
        vectors[t] = vec
    return TopicVectorSet(vectors=vectors, provenance=provenance or {})


def scale_topic_vector(
    v: TopicVector, conditional_scale: float = 10.0, latent_scale: float = 2.5
) -> TopicVector:
    v.validate()
    return TopicVector(
        topic=v.topic,
        conditional_part=v.conditional_part * conditional_scale,
        latent_part=v.latent_part * latent_scale,
    )


def _check_segments(model: CvaeModel, v: TopicVector) -> None:
    if len(v.conditional_part) != model.config.conditional_length or len(v.latent_part) != model.config.latent_dim:
        raise ShapeError(
            f"topic vector segments ({len(v.conditional_part)}, {len(v.latent_part)}) do not match "
            f"model ({model.config.conditional_length}, {model.config.latent_dim})"
        )


def transform_batch(
    model: CvaeModel, images: np.ndarray, y_rows: np.ndarray, v_scaled: TopicVector
) -> np.ndarray:
    """Shift the (epsilon=0) embeddings of a batch by v_scaled and decode."""
    _check_segments(model, v_scaled)
    y_rows = np.asarray(y_rows, dtype=np.float32)
    if y_rows.ndim != 2 or y_rows.shape[1] != model.config.conditional_length:
        raise ShapeError(f"expected y rows (N, {model.config.conditional_length}), got {tuple(y_rows.shape)}")
    mu, _ = encode_batch(model, images)
    q = np.concatenate(
        [
            y_rows + v_scaled.conditional_part.astype(np.float32),
            mu + v_scaled.latent_part.astype(np.float32),
        ],
        axis=1,
    )
    return decode_batch(model, q)


def transform_to_topic(
    model: CvaeModel, image: np.ndarray, y: ConditionalVector, v_scaled: TopicVector
) -> np.ndarray:
    y.validate()
    return transform_batch(model, np.asarray(image)[None], y.to_array()[None], v_scaled)[0]


def zero_topic_vector(model: CvaeModel, topic: str = "identity") -> TopicVector:
    return TopicVector(
        topic=topic,
        conditional_part=np.zeros(model.config.conditional_length),
        latent_part=np.zeros(model.config.latent_dim),
    )
