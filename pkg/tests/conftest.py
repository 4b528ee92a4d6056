"""Shared tiny fixtures: a small corpus plus trained-on-it models.

Everything here is session-scoped and sized to keep the whole suite fast;
the acceptance tests build their own desk-scale fixtures separately.
"""

import numpy as np
import pytest

from advae.classifiers import (
    ClassifierConfig,
    label_dataset,
    train_attribute_classifier,
    train_expression_classifier,
)
from advae.cvae import CvaeConfig, build_cvae
from advae.dataset import DatasetConfig, build_dataset, split_manifest
from advae.losses import LossWeights
from advae.trainer import TrainingConfig, train_cvae

TINY_TOPICS = ("beauty", "domestic_violence", "soda")
TINY_PER_TOPIC = 12
TINY_SIZE = 32
TINY_LATENT = 8
TINY_BASE = 8


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    config = DatasetConfig(
        topics=TINY_TOPICS, per_topic=TINY_PER_TOPIC, image_size=TINY_SIZE, master_seed=11
    )
    return build_dataset(config, root)


@pytest.fixture(scope="session")
def tiny_split(tiny_manifest):
    return split_manifest(tiny_manifest, test_fraction=0.25, seed=11)


@pytest.fixture(scope="session")
def tiny_classifier_config():
    return ClassifierConfig(
        image_size=TINY_SIZE, base_channels=TINY_BASE, epochs=40, master_seed=11, use_augment=False
    )


@pytest.fixture(scope="session")
def tiny_classifier_training(tiny_manifest, tiny_classifier_config):
    return (
        train_attribute_classifier(tiny_manifest, tiny_classifier_config),
        train_expression_classifier(tiny_manifest, tiny_classifier_config),
    )


@pytest.fixture(scope="session")
def tiny_classifiers(tiny_classifier_training):
    (model_a, _), (model_e, _) = tiny_classifier_training
    return model_a, model_e


@pytest.fixture(scope="session")
def tiny_labeled(tiny_manifest, tiny_classifiers):
    model_a, model_e = tiny_classifiers
    return label_dataset(model_a, model_e, tiny_manifest)


@pytest.fixture(scope="session")
def tiny_cvae_config():
    return CvaeConfig(
        image_size=TINY_SIZE,
        latent_dim=TINY_LATENT,
        conditional_length=22,
        base_channels=TINY_BASE,
    )


@pytest.fixture()
def tiny_cvae(tiny_cvae_config):
    return build_cvae(tiny_cvae_config, seed=3)


@pytest.fixture(scope="session")
def tiny_training_config():
    return TrainingConfig(
        learning_rate=1e-3,
        batch_size=12,
        epochs=3,
        weights=LossWeights(alpha=1.0, beta=0.1, gamma=2e-3),
        master_seed=11,
        latent_dim=TINY_LATENT,
        image_size=TINY_SIZE,
        base_channels=TINY_BASE,
        use_augment=False,
    )


@pytest.fixture(scope="session")
def tiny_trained_cvae(tiny_labeled, tiny_classifiers, tiny_training_config):
    model_a, model_e = tiny_classifiers
    model, history = train_cvae(tiny_training_config, tiny_labeled, model_a, model_e)
    return model, history


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
