"""Attribute, expression, and topic classifiers over rendered faces.

The attribute and expression models auto-label the corpus and sit inside
the conditional classification loss; the topic model is used only for
evaluation. All share the same small conv trunk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentConfig, augment
from .conditional import EXPRESSIONS, ConditionalVector, one_hot
from .dataset import DatasetManifest
from .errors import ShapeError, TrainingError
from .labeling import ATTRIBUTE_NAMES
from .networks import ConvTrunk, init_weights
from .optim import Adam
from .util import stable_seed

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    image_size: int = 64
    base_channels: int = 32
    num_attributes: int = len(ATTRIBUTE_NAMES)
    num_expressions: int = len(EXPRESSIONS)
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    val_fraction: float = 0.15
    master_seed: int = 0
    use_augment: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.augment = AugmentConfig(
            train_size=self.image_size,
            zoom_range=self.augment.zoom_range,
            flip_prob=self.augment.flip_prob,
        )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "num_attributes": self.num_attributes,
            "num_expressions": self.num_expressions,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "val_fraction": self.val_fraction,
            "master_seed": self.master_seed,
            "use_augment": self.use_augment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        return cls(**{k: d[k] for k in cls().to_dict().keys() if k in d})


class AttributeClassifier(nn.Module):
    kind = "attribute_classifier"

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.trunk = ConvTrunk(config.image_size, config.base_channels)
        self.head = nn.Linear(self.trunk.out_channels, config.num_attributes)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x)
        return self.head(h.mean(dim=(2, 3)))

    def features(self, x: torch.Tensor, tap: str) -> torch.Tensor:
        return self.trunk(x, tap=tap)


class ExpressionClassifier(nn.Module):
    kind = "expression_classifier"

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.trunk = ConvTrunk(config.image_size, config.base_channels)
        self.expr_head = nn.Linear(self.trunk.out_channels, config.num_expressions)
        # valence/arousal regression; raw output, clamped only at predict time
        self.affect_head = nn.Linear(self.trunk.out_channels, 2)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(x).mean(dim=(2, 3))
        return self.expr_head(h), self.affect_head(h)


class TopicClassifier(nn.Module):
    kind = "topic_classifier"

    def __init__(self, config: ClassifierConfig, num_topics: int):
        super().__init__()
        self.config = config
        self.num_topics = num_topics
        self.trunk = ConvTrunk(config.image_size, config.base_channels)
        self.head = nn.Linear(self.trunk.out_channels, num_topics)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x).mean(dim=(2, 3)))


def _check_image(image: np.ndarray, size: int) -> None:
    if image.shape != (3, size, size):
        raise ShapeError(f"expected image (3, {size}, {size}), got {tuple(image.shape)}")


def load_images(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([manifest.load_image(r) for r in manifest.records]).astype(np.float32)


def _split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        return order, order.copy()  # too few records to hold out; validate in-sample
    return order[n_val:], order[:n_val]


def _train_loop(model, images: np.ndarray, batch_loss, config: ClassifierConfig, tag: str):
    """Seeded minibatch loop with the shared augment schedule."""
    params = {k: v for k, v in model.named_parameters()}
    opt = Adam(params, config.learning_rate)
    data_rng = np.random.default_rng(stable_seed("clf-data", tag, config.master_seed))
    n = len(images)
    gstep = 0
    model.train()
    for epoch in range(config.epochs):
        order = data_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = images[idx]
            if config.use_augment:
                batch = np.stack(
                    [
                        augment(
                            im,
                            stable_seed("clf-aug", tag, config.master_seed, epoch, int(i)),
                            config.augment,
                        )
                        for im, i in zip(batch, idx)
                    ]
                )
            loss = batch_loss(torch.from_numpy(batch), idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"{tag}: non-finite loss at step {gstep}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            gstep += 1
    model.eval()


def train_attribute_classifier(
    manifest: DatasetManifest, config: ClassifierConfig | None = None
) -> tuple[AttributeClassifier, dict]:
    config = config or ClassifierConfig()
    torch.manual_seed(stable_seed("attr-init", config.master_seed))
    model = AttributeClassifier(config)
    images = load_images(manifest)
    labels = np.stack([r.labels.attributes for r in manifest.records]).astype(np.float32)
    train_idx, val_idx = _split(
        len(images), config.val_fraction, stable_seed("attr-split", config.master_seed)
    )
    targets = torch.from_numpy(labels)

    def batch_loss(batch, idx):
        return F.binary_cross_entropy_with_logits(model(batch), targets[idx])

    _train_loop(model, images[train_idx], lambda b, i: batch_loss(b, train_idx[i]), config, "attr")

    with torch.no_grad():
        probs = torch.sigmoid(model(torch.from_numpy(images[val_idx]))).numpy()
    acc = float(np.mean((probs > 0.5).astype(np.float32) == labels[val_idx]))
    metrics = {"val_attribute_accuracy": acc, "val_size": int(len(val_idx))}
    log.info("attribute classifier: held-out accuracy %.4f", acc)
    return model, metrics


def train_expression_classifier(
    manifest: DatasetManifest, config: ClassifierConfig | None = None
) -> tuple[ExpressionClassifier, dict]:
    config = config or ClassifierConfig()
    torch.manual_seed(stable_seed("expr-init", config.master_seed))
    model = ExpressionClassifier(config)
    images = load_images(manifest)
    expr_idx = np.array([r.labels.expression_index for r in manifest.records], dtype=np.int64)
    affect = np.stack(
        [[r.labels.valence, r.labels.arousal] for r in manifest.records]
    ).astype(np.float32)
    train_idx, val_idx = _split(
        len(images), config.val_fraction, stable_seed("expr-split", config.master_seed)
    )
    t_expr = torch.from_numpy(expr_idx)
    t_affect = torch.from_numpy(affect)

    def batch_loss(batch, idx):
        logits, va = model(batch)
        # expression CE and affect MSE weighted 1:1
        return F.cross_entropy(logits, t_expr[idx]) + F.mse_loss(va, t_affect[idx])

    _train_loop(model, images[train_idx], lambda b, i: batch_loss(b, train_idx[i]), config, "expr")

    with torch.no_grad():
        logits, va = model(torch.from_numpy(images[val_idx]))
    pred = logits.numpy().argmax(axis=1)
    acc = float(np.mean(pred == expr_idx[val_idx]))
    va = va.numpy()
    val_mse = float(np.mean((va[:, 0] - affect[val_idx, 0]) ** 2))
    ar_mse = float(np.mean((va[:, 1] - affect[val_idx, 1]) ** 2))
    truth = affect[val_idx, 0]
    if np.std(truth) > 1e-9 and np.std(va[:, 0]) > 1e-9:
        pearson = float(np.corrcoef(va[:, 0], truth)[0, 1])
    else:
        pearson = 0.0
    metrics = {
        "val_expression_accuracy": acc,
        "val_valence_mse": val_mse,
        "val_arousal_mse": ar_mse,
        "val_valence_pearson": pearson,
        "val_size": int(len(val_idx)),
    }
    log.info(
        "expression classifier: held-out acc %.4f valence mse %.4f r %.3f", acc, val_mse, pearson
    )
    return model, metrics


def train_topic_classifier(
    images: np.ndarray,
    topic_targets: np.ndarray,
    num_topics: int,
    config: ClassifierConfig | None = None,
    tag: str = "topic",
) -> TopicClassifier:
    """Trains on in-memory (image, topic index) pairs; used by evaluation."""
    config = config or ClassifierConfig()
    torch.manual_seed(stable_seed("topic-init", tag, config.master_seed))
    model = TopicClassifier(config, num_topics)
    targets = torch.from_numpy(np.asarray(topic_targets, dtype=np.int64))

    def batch_loss(batch, idx):
        return F.cross_entropy(model(batch), targets[idx])

    _train_loop(model, images.astype(np.float32), batch_loss, config, tag)
    return model


def predict_conditional_batch(
    model_a: AttributeClassifier, model_e: ExpressionClassifier, images: np.ndarray
) -> np.ndarray:
    """Binarized conditional vectors, one row per image."""
    size = model_a.config.image_size
    if images.ndim != 4 or images.shape[1:] != (3, size, size):
        raise ShapeError(f"expected images (N, 3, {size}, {size}), got {tuple(images.shape)}")
    model_a.eval()
    model_e.eval()
    with torch.no_grad():
        t = torch.from_numpy(images.astype(np.float32))
        probs = torch.sigmoid(model_a(t)).numpy()
        logits, va = model_e(t)
    attrs = (probs > 0.5).astype(np.float32)  # exactly 0.5 maps to 0
    expr = np.zeros_like(logits.numpy(), dtype=np.float32)
    expr[np.arange(len(expr)), logits.numpy().argmax(axis=1)] = 1.0
    affect = np.clip(va.numpy(), -1.0, 1.0).astype(np.float32)
    return np.concatenate([attrs, expr, affect], axis=1)


def predict_conditional(
    model_a: AttributeClassifier, model_e: ExpressionClassifier, image: np.ndarray
) -> ConditionalVector:
    _check_image(np.asarray(image), model_a.config.image_size)
    row = predict_conditional_batch(model_a, model_e, np.asarray(image)[None])[0]
    a = model_a.config.num_attributes
    e = model_e.config.num_expressions
    return ConditionalVector(
        attributes=row[:a],
        expression=row[a : a + e],
        valence=float(row[a + e]),
        arousal=float(row[a + e + 1]),
    )


def label_dataset(
    model_a: AttributeClassifier, model_e: ExpressionClassifier, manifest: DatasetManifest
) -> DatasetManifest:
    """Copy of the manifest with classifier predictions attached per record."""
    from dataclasses import replace

    kept = []
    images = []
    for rec in manifest.records:
        try:
            images.append(manifest.load_image(rec))
            kept.append(rec)
        except Exception as e:  # noqa: BLE001 - record-level skip is the contract
            log.warning("skipping unreadable record %s: %s", rec.path, e)
    out_records = []
    a = model_a.config.num_attributes
    e = model_e.config.num_expressions
    chunk = 128
    for start in range(0, len(kept), chunk):
        block = np.stack(images[start : start + chunk])
        rows = predict_conditional_batch(model_a, model_e, block)
        for rec, row in zip(kept[start : start + chunk], rows):
            pred = ConditionalVector(
                attributes=row[:a],
                expression=row[a : a + e],
                valence=float(row[a + e]),
                arousal=float(row[a + e + 1]),
            )
            out_records.append(replace(rec, predicted_labels=pred))
    return DatasetManifest(config=manifest.config, records=out_records, root=manifest.root)


def expression_one_hot(index: int, length: int) -> np.ndarray:
    return one_hot(index, length)
