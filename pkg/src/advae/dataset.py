"""Dataset construction and the JSON-lines manifest format.

Manifest layout ("advae-manifest/1"): first line is a header with the
build config and label vocabulary, every following line is one record
{path, topic, params, labels[, predicted_labels]}. Image paths are
relative to the manifest's directory.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .conditional import EXPRESSIONS, ConditionalVector
from .errors import ConfigurationError, DatasetError
from .faces import FaceParams, render_face
from .labeling import ATTRIBUTE_NAMES, derive_labels
from .topics import default_topics
from .util import config_hash, stable_seed

MANIFEST_FORMAT = "advae-manifest/1"


@dataclass
class DatasetConfig:
    topics: tuple[str, ...] = ()
    per_topic: int = 200
    image_size: int = 64
    master_seed: int = 0

    def __post_init__(self):
        if not self.topics:
            self.topics = default_topics()
        self.topics = tuple(self.topics)

    def validate(self) -> None:
        if self.per_topic < 1:
            raise ConfigurationError("per_topic must be >= 1")
        if self.image_size < 32 or self.image_size % 2 != 0:
            raise ConfigurationError("image_size must be even and >= 32")
        if len(set(self.topics)) != len(self.topics):
            raise ConfigurationError("duplicate topics")

    def to_dict(self) -> dict:
        return {
            "topics": list(self.topics),
            "per_topic": self.per_topic,
            "image_size": self.image_size,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(
            topics=tuple(d["topics"]),
            per_topic=int(d["per_topic"]),
            image_size=int(d["image_size"]),
            master_seed=int(d["master_seed"]),
        )


@dataclass
class ManifestRecord:
    path: str  # relative to manifest directory
    topic: str
    params: FaceParams
    labels: ConditionalVector
    predicted_labels: ConditionalVector | None = None

    def to_json_dict(self) -> dict:
        d = {
            "path": self.path,
            "topic": self.topic,
            "params": self.params.to_dict(),
            "labels": self.labels.to_json_dict(),
        }
        if self.predicted_labels is not None:
            d["predicted_labels"] = self.predicted_labels.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ManifestRecord":
        predicted = d.get("predicted_labels")
        return cls(
            path=d["path"],
            topic=d["topic"],
            params=FaceParams.from_dict(d["params"]),
            labels=ConditionalVector.from_json_dict(d["labels"]),
            predicted_labels=(
                ConditionalVector.from_json_dict(predicted) if predicted is not None else None
            ),
        )


@dataclass
class DatasetManifest:
    config: DatasetConfig
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path | None = None

    @property
    def conditional_length(self) -> int:
        return len(ATTRIBUTE_NAMES) + len(EXPRESSIONS) + 2

    def by_topic(self) -> dict[str, list[ManifestRecord]]:
        groups: dict[str, list[ManifestRecord]] = {t: [] for t in self.config.topics}
        for rec in self.records:
            groups.setdefault(rec.topic, []).append(rec)
        return groups

    def image_path(self, record: ManifestRecord) -> Path:
        if self.root is None:
            raise DatasetError("manifest has no root directory; save or load it first")
        return self.root / record.path

    def load_image(self, record: ManifestRecord) -> np.ndarray:
        return load_image_png(self.image_path(record))

    def model_labels(self, record: ManifestRecord) -> ConditionalVector:
        """Labels the generative model consumes: predictions when present."""
        return record.predicted_labels if record.predicted_labels is not None else record.labels

    def header_dict(self) -> dict:
        cfg = self.config.to_dict()
        return {
            "format": MANIFEST_FORMAT,
            "config": cfg,
            "config_hash": config_hash(cfg),
            "attribute_names": list(ATTRIBUTE_NAMES),
            "expression_names": list(EXPRESSIONS),
        }

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        try:
            with open(path, "w", encoding="utf-8") as f:
                f.write(json.dumps(self.header_dict(), sort_keys=True) + "\n")
                for rec in self.records:
                    f.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
        except OSError as e:
            raise DatasetError(f"cannot write manifest {path}: {e}") from e
        if self.root is None:
            self.root = path.parent
        return path


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise DatasetError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"manifest {path}: unsupported format {header.get('format')!r}")
    if tuple(header["attribute_names"]) != ATTRIBUTE_NAMES:
        raise DatasetError(f"manifest {path}: attribute vocabulary mismatch")
    config = DatasetConfig.from_dict(header["config"])
    records = [ManifestRecord.from_json_dict(json.loads(line)) for line in lines[1:] if line]
    return DatasetManifest(config=config, records=records, root=path.parent)


def save_image_png(path: Path | str, image: np.ndarray) -> None:
    arr = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    try:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise DatasetError(f"cannot write image {path}: {e}") from e


def load_image_png(path: Path | str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def record_seed(master_seed: int, topic: str, index: int) -> int:
    return stable_seed("record", master_seed, topic, index)


def build_dataset(config: DatasetConfig, out_dir: Path | str, workers: int = 1) -> DatasetManifest:
    """Render the corpus and write images plus manifest under out_dir.

    Every record is seeded from (master_seed, topic, index), so the output
    is byte-identical for any worker count.
    """
    from .topics import sample_topic_params

    config.validate()
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    try:
        image_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {image_dir}: {e}") from e

    jobs = [
        (topic, i)
        for topic in config.topics
        for i in range(config.per_topic)
    ]

    def make_record(job: tuple[str, int]) -> ManifestRecord:
        topic, i = job
        params = sample_topic_params(topic, record_seed(config.master_seed, topic, i))
        image = render_face(params, config.image_size)
        rel = f"images/{topic}_{i:05d}.png"
        save_image_png(out_dir / rel, image)
        return ManifestRecord(path=rel, topic=topic, params=params, labels=derive_labels(params))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(make_record, jobs))
    else:
        records = [make_record(job) for job in jobs]

    manifest = DatasetManifest(config=config, records=records, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def split_manifest(
    manifest: DatasetManifest, test_fraction: float = 0.2, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded per-topic record split; both halves keep every topic populated."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(stable_seed("split", seed))
    train: list[ManifestRecord] = []
    test: list[ManifestRecord] = []
    for topic, recs in sorted(manifest.by_topic().items()):
        if not recs:
            continue
        n_test = max(1, int(round(len(recs) * test_fraction))) if len(recs) > 1 else 0
        order = rng.permutation(len(recs))
        test.extend(recs[i] for i in sorted(order[:n_test]))
        train.extend(recs[i] for i in sorted(order[n_test:]))
    mk = lambda recs: DatasetManifest(
        config=replace(manifest.config), records=list(recs), root=manifest.root
    )
    return mk(train), mk(test)
