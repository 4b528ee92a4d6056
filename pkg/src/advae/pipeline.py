"""Declarative run configuration and the staged pipeline.

Stages: synth -> train-classifiers -> label -> train -> topic-vectors ->
transform-samples -> eval -> grid. Every stage records a key derived
from its config hash plus input artifact hashes in pipeline_state.json;
a rerun with matching keys and intact outputs is skipped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_classifier, save_checkpoint, save_classifier
from .classifiers import (
    ClassifierConfig,
    label_dataset,
    train_attribute_classifier,
    train_expression_classifier,
)
from .dataset import DatasetConfig, build_dataset, load_manifest, save_image_png, split_manifest
from .errors import ArtifactError, ConfigurationError, ProtocolError
from .evaluate import EvalReport, export_grid, full_evaluation
from .losses import LossWeights
from .trainer import TrainingConfig, model_from_checkpoint, train_cvae
from .transform import TopicVectorSet, compute_topic_vectors, scale_topic_vector, transform_batch
from .util import config_hash, sha256_file

log = logging.getLogger(__name__)

STAGES = (
    "synth",
    "train-classifiers",
    "label",
    "train",
    "topic-vectors",
    "transform-samples",
    "eval",
    "grid",
)

# weights retuned for mean-reduced losses on the synthetic desk corpus;
# the canonical reference setting is alpha=1, beta=gamma=1e-4
DESK_WEIGHTS = {"alpha": 1.0, "beta": 0.1, "gamma": 2e-3}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig())
    test_fraction: float = 0.2
    classifiers: ClassifierConfig = field(default_factory=ClassifierConfig)
    training: TrainingConfig = field(
        default_factory=lambda: TrainingConfig(weights=LossWeights(**DESK_WEIGHTS))
    )
    conditional_scale: float = 10.0
    latent_scale: float = 2.5
    eval_classifier_epochs: int = 4
    eval_max_faces: int = 100
    grid_faces: int = 4

    def __post_init__(self):
        # one master seed drives every stage
        self.dataset.master_seed = self.seed
        self.classifiers.master_seed = self.seed
        self.training.master_seed = self.seed
        if self.classifiers.image_size != self.dataset.image_size:
            self.classifiers = ClassifierConfig(
                **{**self.classifiers.to_dict(), "image_size": self.dataset.image_size}
            )

    def validate(self) -> None:
        self.dataset.validate()
        self.training.validate()
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must be in (0, 1)")
        if self.eval_classifier_epochs < 1:
            raise ConfigurationError("eval_classifier_epochs must be >= 1")
        if self.conditional_scale < 0 or self.latent_scale < 0:
            raise ConfigurationError("transformation scales must be >= 0")
        if self.training.image_size != self.dataset.image_size:
            raise ConfigurationError("training.image_size must match dataset.image_size")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "test_fraction": self.test_fraction,
            "classifiers": self.classifiers.to_dict(),
            "training": self.training.to_dict(),
            "conditional_scale": self.conditional_scale,
            "latent_scale": self.latent_scale,
            "eval_classifier_epochs": self.eval_classifier_epochs,
            "eval_max_faces": self.eval_max_faces,
            "grid_faces": self.grid_faces,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        defaults = cls().to_dict()
        unknown = set(d) - set(defaults)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        merged = {**defaults, **d}
        for section, builder in (
            ("dataset", DatasetConfig.from_dict),
            ("classifiers", ClassifierConfig.from_dict),
            ("training", TrainingConfig.from_dict),
        ):
            section_defaults = defaults[section]
            given = merged[section]
            if not isinstance(given, dict):
                raise ConfigurationError(f"config section {section!r} must be an object")
            bad = set(given) - set(section_defaults)
            if bad:
                raise ConfigurationError(f"unknown keys in {section!r}: {sorted(bad)}")
            if section == "training" and "weights" in given:
                bad_w = set(given["weights"]) - {"alpha", "beta", "gamma"}
                if bad_w:
                    raise ConfigurationError(f"unknown keys in training.weights: {sorted(bad_w)}")
            merged[section] = builder({**section_defaults, **given})
        config = cls(**merged)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ArtifactError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)


@dataclass
class StageResult:
    name: str
    skipped: bool
    outputs: dict[str, str]


class Pipeline:
    def __init__(self, config: RunConfig, workdir: Path | str, force: bool = False):
        config.validate()
        self.config = config
        self.workdir = Path(workdir)
        self.force = force
        self.data_dir = self.workdir / "data"
        self.model_dir = self.workdir / "models"
        self.artifact_dir = self.workdir / "artifacts"
        for d in (self.data_dir, self.model_dir, self.artifact_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.state_path = self.workdir / "pipeline_state.json"
        self.state = self._load_state()

    # artifact paths
    @property
    def manifest_path(self):
        return self.data_dir / "manifest.jsonl"

    @property
    def train_path(self):
        return self.data_dir / "train.jsonl"

    @property
    def test_path(self):
        return self.data_dir / "test.jsonl"

    @property
    def train_labeled_path(self):
        return self.data_dir / "train_labeled.jsonl"

    @property
    def test_labeled_path(self):
        return self.data_dir / "test_labeled.jsonl"

    @property
    def attribute_ckpt(self):
        return self.model_dir / "attribute.ckpt"

    @property
    def expression_ckpt(self):
        return self.model_dir / "expression.ckpt"

    @property
    def cvae_ckpt(self):
        return self.model_dir / "cvae.ckpt"

    @property
    def vectors_path(self):
        return self.artifact_dir / "topic_vectors.json"

    @property
    def report_path(self):
        return self.artifact_dir / "eval.json"

    @property
    def grid_path(self):
        return self.artifact_dir / "grid.png"

    def _load_state(self) -> dict:
        if self.state_path.exists():
            try:
                return json.loads(self.state_path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                log.warning("unreadable pipeline state at %s, starting fresh", self.state_path)
        return {}

    def _save_state(self) -> None:
        self.state_path.write_text(json.dumps(self.state, indent=2, sort_keys=True), encoding="utf-8")

    def _up_to_date(self, name: str, key: str, outputs: list[Path]) -> bool:
        if self.force:
            return False
        entry = self.state.get(name)
        if not entry or entry.get("key") != key:
            return False
        recorded = entry.get("outputs", {})
        for p in outputs:
            rel = str(p.relative_to(self.workdir))
            if rel not in recorded or not p.exists() or sha256_file(p) != recorded[rel]:
                return False
        return True

    def _record(self, name: str, key: str, outputs: list[Path]) -> dict[str, str]:
        hashes = {str(p.relative_to(self.workdir)): sha256_file(p) for p in outputs}
        self.state[name] = {"key": key, "outputs": hashes}
        self._save_state()
        return hashes

    def _run_stage(self, name: str, key_parts: dict, outputs: list[Path], fn) -> StageResult:
        key = config_hash(key_parts)
        if self._up_to_date(name, key, outputs):
            log.info("stage %s up to date, skipping", name)
            return StageResult(name=name, skipped=True, outputs=self.state[name]["outputs"])
        log.info("stage %s running", name)
        fn(key)
        missing = [p for p in outputs if not p.exists()]
        if missing:
            raise ArtifactError(f"stage {name} did not produce {missing}")
        return StageResult(name=name, skipped=False, outputs=self._record(name, key, outputs))

    # stages -----------------------------------------------------------

    def stage_synth(self) -> StageResult:
        cfg = self.config

        def fn(_key):
            manifest = build_dataset(cfg.dataset, self.data_dir)
            train, test = split_manifest(manifest, cfg.test_fraction, seed=cfg.seed)
            train.save(self.train_path)
            test.save(self.test_path)

        return self._run_stage(
            "synth",
            {"dataset": cfg.dataset.to_dict(), "test_fraction": cfg.test_fraction, "seed": cfg.seed},
            [self.manifest_path, self.train_path, self.test_path],
            fn,
        )

    def stage_train_classifiers(self) -> StageResult:
        cfg = self.config

        def fn(_key):
            manifest = load_manifest(self.train_path)
            model_a, metrics_a = train_attribute_classifier(manifest, cfg.classifiers)
            model_e, metrics_e = train_expression_classifier(manifest, cfg.classifiers)
            save_classifier(self.attribute_ckpt, model_a, metrics_a)
            save_classifier(self.expression_ckpt, model_e, metrics_e)

        return self._run_stage(
            "train-classifiers",
            {"classifiers": cfg.classifiers.to_dict(), "train": sha256_file(self.train_path)},
            [self.attribute_ckpt, self.expression_ckpt],
            fn,
        )

    def stage_label(self) -> StageResult:
        def fn(_key):
            model_a = load_classifier(self.attribute_ckpt)
            model_e = load_classifier(self.expression_ckpt)
            for src, dst in ((self.train_path, self.train_labeled_path), (self.test_path, self.test_labeled_path)):
                labeled = label_dataset(model_a, model_e, load_manifest(src))
                labeled.save(dst)

        return self._run_stage(
            "label",
            {
                "train": sha256_file(self.train_path),
                "test": sha256_file(self.test_path),
                "models": [sha256_file(self.attribute_ckpt), sha256_file(self.expression_ckpt)],
            },
            [self.train_labeled_path, self.test_labeled_path],
            fn,
        )

    def stage_train(self) -> StageResult:
        cfg = self.config

        def fn(key):
            manifest = load_manifest(self.train_labeled_path)
            model_a = load_classifier(self.attribute_ckpt)
            model_e = load_classifier(self.expression_ckpt)
            resume = None
            last = self.model_dir / "cvae_last.ckpt"
            if last.exists():
                candidate = load_checkpoint(last)
                if candidate.meta.get("stage_key") == key and candidate.epoch < cfg.training.epochs:
                    log.info("resuming training from epoch %d", candidate.epoch)
                    resume = candidate
            meta = {"stage_key": key, "manifest": sha256_file(self.train_labeled_path)}
            model, history = train_cvae(
                cfg.training,
                manifest,
                model_a,
                model_e,
                resume=resume,
                workdir=self.model_dir,
                meta=meta,
            )
            final = load_checkpoint(self.model_dir / "cvae_last.ckpt")
            save_checkpoint(self.cvae_ckpt, final)

        return self._run_stage(
            "train",
            {
                "training": cfg.training.to_dict(),
                "manifest": sha256_file(self.train_labeled_path),
                "models": [sha256_file(self.attribute_ckpt), sha256_file(self.expression_ckpt)],
            },
            [self.cvae_ckpt],
            fn,
        )

    def stage_topic_vectors(self) -> StageResult:
        def fn(_key):
            model = model_from_checkpoint(load_checkpoint(self.cvae_ckpt))
            manifest = load_manifest(self.train_labeled_path)
            provenance = {
                "model": sha256_file(self.cvae_ckpt),
                "manifest": sha256_file(self.train_labeled_path),
            }
            compute_topic_vectors(model, manifest, provenance).save(self.vectors_path)

        return self._run_stage(
            "topic-vectors",
            {
                "model": sha256_file(self.cvae_ckpt),
                "manifest": sha256_file(self.train_labeled_path),
            },
            [self.vectors_path],
            fn,
        )

    def _scaled_vectors(self):
        vector_set = TopicVectorSet.load(self.vectors_path)
        return vector_set, {
            t: scale_topic_vector(vector_set[t], self.config.conditional_scale, self.config.latent_scale)
            for t in vector_set.topics
        }

    def _check_provenance(self, provenance: dict) -> None:
        if self.force:
            return
        expected = sha256_file(self.cvae_ckpt)
        if provenance.get("model") not in (None, expected):
            raise ProtocolError(
                "topic vectors were computed from a different model checkpoint; "
                "rerun topic-vectors or pass force"
            )

    def stage_transform_samples(self) -> StageResult:
        cfg = self.config
        out_dir = self.artifact_dir / "transforms"
        topics = sorted(cfg.dataset.topics)
        outputs = [out_dir / f"sample.{t}.png" for t in topics]

        def fn(_key):
            out_dir.mkdir(parents=True, exist_ok=True)
            model = model_from_checkpoint(load_checkpoint(self.cvae_ckpt))
            vector_set, scaled = self._scaled_vectors()
            self._check_provenance(vector_set.provenance)
            manifest = load_manifest(self.test_labeled_path)
            rec = manifest.records[0]
            image = manifest.load_image(rec)[None]
            y = manifest.model_labels(rec).to_array()[None]
            for t in topics:
                save_image_png(out_dir / f"sample.{t}.png", transform_batch(model, image, y, scaled[t])[0])

        return self._run_stage(
            "transform-samples",
            {
                "model": sha256_file(self.cvae_ckpt),
                "vectors": sha256_file(self.vectors_path),
                "scales": [cfg.conditional_scale, cfg.latent_scale],
            },
            outputs,
            fn,
        )

    def stage_eval(self) -> StageResult:
        cfg = self.config

        def fn(_key):
            model = model_from_checkpoint(load_checkpoint(self.cvae_ckpt))
            vector_set, scaled = self._scaled_vectors()
            self._check_provenance(vector_set.provenance)
            model_a = load_classifier(self.attribute_ckpt)
            model_e = load_classifier(self.expression_ckpt)
            clf_config = ClassifierConfig(
                **{
                    **cfg.classifiers.to_dict(),
                    "epochs": cfg.eval_classifier_epochs,
                    "master_seed": cfg.seed,
                }
            )
            report = full_evaluation(
                model,
                vector_set,
                scaled,
                model_a,
                model_e,
                load_manifest(self.train_labeled_path),
                load_manifest(self.test_labeled_path),
                clf_config,
                seed=cfg.seed,
                provenance={
                    "model": sha256_file(self.cvae_ckpt),
                    "vectors": sha256_file(self.vectors_path),
                    "config": config_hash(cfg.to_dict()),
                },
            )
            report.save(self.report_path)

        return self._run_stage(
            "eval",
            {
                "model": sha256_file(self.cvae_ckpt),
                "vectors": sha256_file(self.vectors_path),
                "scales": [cfg.conditional_scale, cfg.latent_scale],
                "eval_epochs": cfg.eval_classifier_epochs,
                "seed": cfg.seed,
            },
            [self.report_path],
            fn,
        )

    def stage_grid(self) -> StageResult:
        cfg = self.config

        def fn(_key):
            model = model_from_checkpoint(load_checkpoint(self.cvae_ckpt))
            vector_set, scaled = self._scaled_vectors()
            self._check_provenance(vector_set.provenance)
            scaled_set = TopicVectorSet(vectors=scaled, provenance=vector_set.provenance)
            export_grid(model, scaled_set, load_manifest(self.test_labeled_path), self.grid_path, cfg.grid_faces)

        return self._run_stage(
            "grid",
            {
                "model": sha256_file(self.cvae_ckpt),
                "vectors": sha256_file(self.vectors_path),
                "scales": [cfg.conditional_scale, cfg.latent_scale],
                "faces": cfg.grid_faces,
            },
            [self.grid_path],
            fn,
        )

    def run(self, stages: list[str] | None = None) -> list[StageResult]:
        table = {
            "synth": self.stage_synth,
            "train-classifiers": self.stage_train_classifiers,
            "label": self.stage_label,
            "train": self.stage_train,
            "topic-vectors": self.stage_topic_vectors,
            "transform-samples": self.stage_transform_samples,
            "eval": self.stage_eval,
            "grid": self.stage_grid,
        }
        chosen = stages or list(STAGES)
        unknown = set(chosen) - set(table)
        if unknown:
            raise ConfigurationError(f"unknown stages: {sorted(unknown)}")
        results = []
        for name in STAGES:
            if name in chosen:
                results.append(table[name]())
        return results
