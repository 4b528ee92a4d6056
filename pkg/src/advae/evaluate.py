"""Evaluation: the topic-prediction protocol (train a topic classifier on
transformed faces, test on untransformed held-out faces), conditional
round-trip fidelity under attribute/expression flips, and grid export.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifiers import (
    AttributeClassifier,
    ClassifierConfig,
    ExpressionClassifier,
    predict_conditional_batch,
    train_topic_classifier,
)
from .conditional import EXPRESSIONS, ConditionalVector, one_hot
from .cvae import CvaeModel, decode_batch, encode_batch
from .dataset import DatasetManifest, save_image_png
from .errors import ArtifactError, DomainError, ProtocolError
from .labeling import ATTRIBUTE_NAMES
from .transform import TopicVector, TopicVectorSet, transform_batch, zero_topic_vector
from .util import canonical_json, stable_seed

log = logging.getLogger(__name__)

EVAL_FORMAT = "advae-eval/1"


@dataclass
class FlipSpec:
    """One conditional edit for the round-trip measurement.

    kind "attribute": set (or toggle, when value is None) the named
    attribute. kind "expression": move faces whose current expression is
    `source` (all faces when None) to the `name` expression. With
    tied=True the edit also adjusts the components that co-vary with the
    flipped one (valence, expression one-hot / smiling bit), keeping the
    request inside the conditional distribution the decoder was trained
    on; the realization metric still scores only the flipped component.
    """

    kind: str
    name: str
    value: int | None = None
    source: str | None = None
    tied: bool = True

    def label(self) -> str:
        if self.kind == "attribute":
            tgt = "toggle" if self.value is None else str(self.value)
            return f"attribute:{self.name}={tgt}"
        return f"expression:{self.source or 'any'}->{self.name}"


def apply_flip(y: ConditionalVector, flip: FlipSpec) -> tuple[ConditionalVector, int]:
    """Returns the edited vector and the realized-component target index."""
    attrs = y.attributes.copy()
    expr = y.expression.copy()
    valence, arousal = y.valence, y.arousal
    if flip.kind == "attribute":
        if flip.name not in ATTRIBUTE_NAMES:
            raise DomainError(f"unknown attribute {flip.name!r}")
        ai = ATTRIBUTE_NAMES.index(flip.name)
        target = int(1 - attrs[ai]) if flip.value is None else int(flip.value)
        attrs[ai] = target
        if flip.tied and flip.name == "smiling":
            expr = one_hot(EXPRESSIONS.index("happy" if target else "neutral"), len(EXPRESSIONS))
            valence = 0.5 if target else 0.0
        return (
            ConditionalVector(attributes=attrs, expression=expr, valence=valence, arousal=arousal),
            target,
        )
    if flip.kind == "expression":
        if flip.name not in EXPRESSIONS:
            raise DomainError(f"unknown expression {flip.name!r}")
        ei = EXPRESSIONS.index(flip.name)
        expr = one_hot(ei, len(EXPRESSIONS))
        if flip.tied:
            if flip.name == "sad":
                valence = -0.5
                attrs[ATTRIBUTE_NAMES.index("smiling")] = 0.0
                attrs[ATTRIBUTE_NAMES.index("lowered_brows")] = 0.0
            elif flip.name == "happy":
                valence = 0.5
                attrs[ATTRIBUTE_NAMES.index("smiling")] = 1.0
            elif flip.name == "neutral":
                valence = 0.0
                attrs[ATTRIBUTE_NAMES.index("smiling")] = 0.0
        return (
            ConditionalVector(attributes=attrs, expression=expr, valence=valence, arousal=arousal),
            ei,
        )
    raise DomainError(f"unknown flip kind {flip.kind!r}")


@dataclass
class EvalReport:
    topics: list[str]
    topic_prediction_accuracy: float
    confusion: list[list[int]]  # rows true topic, columns predicted
    baselines: dict[str, float]
    oracle_topic_accuracy: float
    round_trip_attribute_agreement: float
    round_trip_expression_accuracy: float
    round_trip: dict[str, dict]
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        mat = np.asarray(self.confusion)
        if mat.shape != (len(self.topics), len(self.topics)):
            raise DomainError("confusion matrix shape does not match topic count")
        total = mat.sum()
        if total > 0 and abs(np.trace(mat) / total - self.topic_prediction_accuracy) > 1e-9:
            raise DomainError("accuracy inconsistent with confusion matrix")

    def to_json_dict(self) -> dict:
        return {
            "format": EVAL_FORMAT,
            "topics": self.topics,
            "topic_prediction_accuracy": self.topic_prediction_accuracy,
            "confusion": self.confusion,
            "baselines": self.baselines,
            "oracle_topic_accuracy": self.oracle_topic_accuracy,
            "round_trip_attribute_agreement": self.round_trip_attribute_agreement,
            "round_trip_expression_accuracy": self.round_trip_expression_accuracy,
            "round_trip": self.round_trip,
            "provenance": self.provenance,
        }

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        try:
            path.write_text(canonical_json(self.to_json_dict()) + "\n", encoding="utf-8")
        except OSError as e:
            raise ArtifactError(f"cannot write eval report {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Path | str) -> "EvalReport":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ArtifactError(f"cannot read eval report {path}: {e}") from e
        if d.get("format") != EVAL_FORMAT:
            raise ArtifactError(f"{path}: unsupported format {d.get('format')!r}")
        d.pop("format")
        return cls(**d)


def _check_disjoint(manifest_train: DatasetManifest, manifest_test: DatasetManifest) -> None:
    overlap = {r.path for r in manifest_train.records} & {r.path for r in manifest_test.records}
    if overlap:
        raise ProtocolError(
            f"train/test manifests share {len(overlap)} records, e.g. {sorted(overlap)[:3]}"
        )


def _manifest_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([manifest.load_image(r) for r in manifest.records]).astype(np.float32)
    labels = np.stack([manifest.model_labels(r).to_array() for r in manifest.records]).astype(
        np.float32
    )
    return images, labels


def build_protocol_training_set(
    model: CvaeModel,
    vectors: dict[str, TopicVector],
    manifest_train: DatasetManifest,
    topics: list[str],
    chunk: int = 128,
) -> tuple[np.ndarray, np.ndarray]:
    """Every train face transformed into every topic, labeled by target topic."""
    images, labels = _manifest_arrays(manifest_train)
    out_images = []
    out_targets = []
    for ti, topic in enumerate(topics):
        v = vectors[topic]
        for start in range(0, len(images), chunk):
            out_images.append(
                transform_batch(model, images[start : start + chunk], labels[start : start + chunk], v)
            )
        out_targets.append(np.full(len(images), ti, dtype=np.int64))
    return np.concatenate(out_images, axis=0), np.concatenate(out_targets)


def topic_prediction_protocol(
    model: CvaeModel,
    vectors: dict[str, TopicVector],
    manifest_train: DatasetManifest,
    manifest_test: DatasetManifest,
    clf_config: ClassifierConfig | None = None,
    shuffle_targets: bool = False,
    seed: int = 0,
    tag: str = "protocol",
) -> tuple[float, np.ndarray]:
    """Train a topic classifier on transformed train faces, evaluate on raw
    held-out faces. Returns (accuracy, confusion[true, predicted])."""
    _check_disjoint(manifest_train, manifest_test)
    topics = sorted(manifest_train.config.topics)
    train_images, train_targets = build_protocol_training_set(model, vectors, manifest_train, topics)
    if shuffle_targets:
        rng = np.random.default_rng(stable_seed("protocol-shuffle", seed))
        train_targets = rng.permutation(train_targets)
    clf = train_topic_classifier(train_images, train_targets, len(topics), clf_config, tag=tag)

    test_images, _ = _manifest_arrays(manifest_test)
    true_idx = np.array([topics.index(r.topic) for r in manifest_test.records])
    import torch

    with torch.no_grad():
        logits = clf(torch.from_numpy(test_images))
    pred = logits.numpy().argmax(axis=1)
    t = len(topics)
    confusion = np.zeros((t, t), dtype=np.int64)
    for a, b in zip(true_idx, pred):
        confusion[a, b] += 1
    accuracy = float(np.trace(confusion) / max(1, confusion.sum()))
    log.info("protocol %s: accuracy %.4f", tag, accuracy)
    return accuracy, confusion


def oracle_topic_transform_accuracy(
    model: CvaeModel,
    vectors: dict[str, TopicVector],
    manifest_train: DatasetManifest,
    manifest_test: DatasetManifest,
    clf_config: ClassifierConfig | None = None,
) -> float:
    """Fraction of transformed held-out faces that a classifier trained on
    raw ground-truth-topic faces assigns to the transformation target."""
    topics = sorted(manifest_train.config.topics)
    raw_images, _ = _manifest_arrays(manifest_train)
    raw_targets = np.array([topics.index(r.topic) for r in manifest_train.records], dtype=np.int64)
    oracle = train_topic_classifier(raw_images, raw_targets, len(topics), clf_config, tag="oracle-topic")

    test_images, test_labels = _manifest_arrays(manifest_test)
    import torch

    hits = 0
    total = 0
    for ti, topic in enumerate(topics):
        transformed = transform_batch(model, test_images, test_labels, vectors[topic])
        with torch.no_grad():
            pred = oracle(torch.from_numpy(transformed)).numpy().argmax(axis=1)
        hits += int((pred == ti).sum())
        total += len(pred)
    return hits / max(1, total)


def round_trip_fidelity(
    model: CvaeModel,
    model_a: AttributeClassifier,
    model_e: ExpressionClassifier,
    manifest: DatasetManifest,
    flips: list[FlipSpec],
    max_faces: int = 100,
) -> dict[str, dict]:
    """Realization rates for each flip, plus the empty-plan baseline."""
    a = len(ATTRIBUTE_NAMES)
    results: dict[str, dict] = {}

    def reconstruct_rows(records, y_rows):
        images = np.stack([manifest.load_image(r) for r in records])
        mu, _ = encode_batch(model, images)
        q = np.concatenate([y_rows.astype(np.float32), mu], axis=1)
        return decode_batch(model, q)

    base_records = manifest.records[:max_faces]
    base_rows = np.stack([manifest.model_labels(r).to_array() for r in base_records])
    recon = reconstruct_rows(base_records, base_rows)
    pred = predict_conditional_batch(model_a, model_e, recon)
    attr_agree = float(np.mean(pred[:, :a] == base_rows[:, :a]))
    expr_acc = float(
        np.mean(pred[:, a : a + len(EXPRESSIONS)].argmax(axis=1) == base_rows[:, a : a + len(EXPRESSIONS)].argmax(axis=1))
    )
    results["baseline"] = {
        "attribute_agreement": attr_agree,
        "expression_accuracy": expr_acc,
        "count": len(base_records),
    }

    for flip in flips:
        if flip.kind == "expression" and flip.source is not None:
            if flip.source not in EXPRESSIONS:
                raise DomainError(f"unknown expression {flip.source!r}")
            records = [
                r
                for r in manifest.records
                if manifest.model_labels(r).expression_index == EXPRESSIONS.index(flip.source)
            ][:max_faces]
        else:
            records = manifest.records[:max_faces]
        if not records:
            results[flip.label()] = {"realized": float("nan"), "count": 0}
            continue
        flipped_rows = []
        targets = []
        for r in records:
            y1, target = apply_flip(manifest.model_labels(r), flip)
            flipped_rows.append(y1.to_array())
            targets.append(target)
        out = reconstruct_rows(records, np.stack(flipped_rows))
        pred = predict_conditional_batch(model_a, model_e, out)
        targets = np.array(targets)
        if flip.kind == "attribute":
            ai = ATTRIBUTE_NAMES.index(flip.name)
            realized = float(np.mean(pred[:, ai] == targets))
        else:
            realized = float(np.mean(pred[:, a : a + len(EXPRESSIONS)].argmax(axis=1) == targets))
        results[flip.label()] = {"realized": realized, "count": len(records)}
        log.info("round trip %s: realized %.3f over %d faces", flip.label(), realized, len(records))
    return results


def export_grid(
    model: CvaeModel,
    vector_set: TopicVectorSet,
    manifest: DatasetManifest,
    path: Path | str,
    num_faces: int = 4,
) -> Path:
    """PNG grid: column 0 original, column 1 reconstruction, then one
    column per topic transformation; one row per face."""
    records = manifest.records[:num_faces]
    if not records:
        raise DomainError("no records to render")
    topics = vector_set.topics
    images = np.stack([manifest.load_image(r) for r in records])
    y_rows = np.stack([manifest.model_labels(r).to_array() for r in records])
    mu, _ = encode_batch(model, images)
    recon = decode_batch(model, np.concatenate([y_rows.astype(np.float32), mu], axis=1))
    columns = [images, recon]
    for t in topics:
        columns.append(transform_batch(model, images, y_rows, vector_set[t]))
    s = model.config.image_size
    grid = np.zeros((3, len(records) * s, len(columns) * s), dtype=np.float32)
    for col, block in enumerate(columns):
        for row in range(len(records)):
            grid[:, row * s : (row + 1) * s, col * s : (col + 1) * s] = block[row]
    save_image_png(path, grid)
    return Path(path)


def full_evaluation(
    model: CvaeModel,
    vector_set: TopicVectorSet,
    scaled: dict[str, TopicVector],
    model_a: AttributeClassifier,
    model_e: ExpressionClassifier,
    manifest_train: DatasetManifest,
    manifest_test: DatasetManifest,
    clf_config: ClassifierConfig | None = None,
    seed: int = 0,
    provenance: dict | None = None,
) -> EvalReport:
    """Protocol with baselines + oracle transform accuracy + round trips."""
    topics = sorted(manifest_train.config.topics)
    from .transform import scale_topic_vector

    identity = {t: zero_topic_vector(model, t) for t in topics}
    latent_only = {
        t: scale_topic_vector(vector_set[t], conditional_scale=0.0, latent_scale=2.5)
        for t in topics
    }

    accuracy, confusion = topic_prediction_protocol(
        model, scaled, manifest_train, manifest_test, clf_config, seed=seed, tag="protocol-full"
    )
    acc_identity, _ = topic_prediction_protocol(
        model, identity, manifest_train, manifest_test, clf_config, seed=seed, tag="protocol-identity"
    )
    acc_latent, _ = topic_prediction_protocol(
        model, latent_only, manifest_train, manifest_test, clf_config, seed=seed, tag="protocol-latent"
    )
    acc_perm, _ = topic_prediction_protocol(
        model,
        identity,
        manifest_train,
        manifest_test,
        clf_config,
        shuffle_targets=True,
        seed=seed,
        tag="protocol-permutation",
    )
    oracle_acc = oracle_topic_transform_accuracy(
        model, scaled, manifest_train, manifest_test, clf_config
    )
    flips = [
        FlipSpec(kind="attribute", name="smiling"),
        FlipSpec(kind="expression", name="sad", source="happy"),
    ]
    round_trip = round_trip_fidelity(model, model_a, model_e, manifest_test, flips)
    report = EvalReport(
        topics=topics,
        topic_prediction_accuracy=accuracy,
        confusion=[[int(x) for x in row] for row in confusion],
        baselines={
            "identity": acc_identity,
            "latent_only": acc_latent,
            "permutation": acc_perm,
        },
        oracle_topic_accuracy=oracle_acc,
        round_trip_attribute_agreement=round_trip["attribute:smiling=toggle"]["realized"],
        round_trip_expression_accuracy=round_trip["expression:happy->sad"]["realized"],
        round_trip=round_trip,
        provenance=provenance or {},
    )
    report.validate()
    return report
