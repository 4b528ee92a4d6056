"""Command-line interface: one subcommand per pipeline stage plus `run`.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, load_classifier, save_checkpoint, save_classifier
from .classifiers import (
    ClassifierConfig,
    label_dataset,
    predict_conditional,
    train_attribute_classifier,
    train_expression_classifier,
)
from .dataset import (
    DatasetConfig,
    build_dataset,
    load_image_png,
    load_manifest,
    save_image_png,
    split_manifest,
)
from .errors import AdvaeError, ConfigurationError, ProtocolError
from .evaluate import export_grid, full_evaluation
from .losses import LossWeights
from .pipeline import DESK_WEIGHTS, STAGES, Pipeline, RunConfig
from .topics import default_topics
from .trainer import TrainingConfig, model_from_checkpoint, tiny_gradcheck_report, train_cvae
from .transform import TopicVectorSet, compute_topic_vectors, scale_topic_vector, transform_to_topic
from .util import config_hash, sha256_file

log = logging.getLogger(__name__)

EPILOG = (
    "Reference defaults: learning rate 5e-4, Adam(0.9, 0.999, 1e-8), batch size 32, "
    "latent dimension 100, conditional scale 10, latent scale 2.5, crop 128 at full "
    "scale (64 at desk scale), loss weights alpha=1 beta=gamma=1e-4 (desk-scale "
    f"retuning: {DESK_WEIGHTS})."
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the CLI contract reserves 1 for validation
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_topics(value: str | None) -> tuple[str, ...]:
    available = default_topics()
    if value is None:
        return available
    if value.isdigit():
        n = int(value)
        if not 1 <= n <= len(available):
            raise ConfigurationError(f"--topics count must be 1..{len(available)}")
        return available[:n]
    topics = tuple(t.strip() for t in value.split(",") if t.strip())
    unknown = set(topics) - set(available)
    if unknown:
        raise ConfigurationError(f"unknown topics {sorted(unknown)}; available: {list(available)}")
    return topics


def cmd_synth(args) -> int:
    config = DatasetConfig(
        topics=_parse_topics(args.topics),
        per_topic=args.per_topic,
        image_size=args.image_size,
        master_seed=args.seed,
    )
    out = Path(args.out)
    manifest = build_dataset(config, out, workers=args.workers)
    train, test = split_manifest(manifest, args.test_fraction, seed=args.seed)
    train.save(out / "train.jsonl")
    test.save(out / "test.jsonl")
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.jsonl'}")
    print(f"split: {len(train.records)} train / {len(test.records)} test")
    return 0


def _classifier_config(args) -> ClassifierConfig:
    return ClassifierConfig(
        image_size=args.image_size,
        base_channels=args.base_channels,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        master_seed=args.seed,
    )


def cmd_train_classifiers(args) -> int:
    manifest = load_manifest(args.manifest)
    config = _classifier_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_a, metrics_a = train_attribute_classifier(manifest, config)
    save_classifier(out / "attribute.ckpt", model_a, metrics_a)
    model_e, metrics_e = train_expression_classifier(manifest, config)
    save_classifier(out / "expression.ckpt", model_e, metrics_e)
    for name, metrics in (("attribute", metrics_a), ("expression", metrics_e)):
        print(f"{name}: " + " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


def cmd_label(args) -> int:
    manifest = load_manifest(args.manifest)
    models = Path(args.models)
    labeled = label_dataset(
        load_classifier(models / "attribute.ckpt"),
        load_classifier(models / "expression.ckpt"),
        manifest,
    )
    labeled.save(args.out)
    print(f"labeled {len(labeled.records)} records -> {args.out}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    models = Path(args.models)
    model_a = load_classifier(models / "attribute.ckpt")
    model_e = load_classifier(models / "expression.ckpt")
    config = TrainingConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        weights=LossWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma),
        master_seed=args.seed,
        latent_dim=args.latent_dim,
        image_size=args.image_size,
        base_channels=args.base_channels,
        conditional_target=args.conditional_target,
    )
    out = Path(args.out)
    workdir = Path(args.workdir) if args.workdir else out.parent
    resume = load_checkpoint(args.resume) if args.resume else None
    train_cvae(config, manifest, model_a, model_e, resume=resume, workdir=workdir)
    final = load_checkpoint(workdir / "cvae_last.ckpt")
    save_checkpoint(out, final)
    last = final.history[-1]
    print(f"trained {final.epoch} epochs; final total loss {last['total']:.5f} -> {out}")
    return 0


def cmd_topic_vectors(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    manifest = load_manifest(args.manifest)
    provenance = {
        "model": sha256_file(args.checkpoint),
        "manifest": sha256_file(args.manifest),
    }
    vector_set = compute_topic_vectors(model, manifest, provenance)
    vector_set.save(args.out)
    print(f"wrote vectors for {len(vector_set.topics)} topics -> {args.out}")
    return 0


def cmd_transform(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    vector_set = TopicVectorSet.load(args.vectors)
    models = Path(args.models)
    image = load_image_png(args.input)
    if image.shape[1] != model.config.image_size:
        raise ConfigurationError(
            f"input is {image.shape[1]}x{image.shape[2]}, model wants {model.config.image_size}"
        )
    y = predict_conditional(
        load_classifier(models / "attribute.ckpt"),
        load_classifier(models / "expression.ckpt"),
        image,
    )
    v = scale_topic_vector(vector_set[args.topic], args.scale_cond, args.scale_lat)
    out = Path(args.out) if args.out else Path(args.input).with_suffix(f".{args.topic}.png")
    save_image_png(out, transform_to_topic(model, image, y, v))
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    vector_set = TopicVectorSet.load(args.vectors)
    if not args.force:
        expected = sha256_file(args.checkpoint)
        got = vector_set.provenance.get("model")
        if got not in (None, expected):
            raise ProtocolError(
                "topic vectors come from a different model checkpoint (pass --force to override)"
            )
    models = Path(args.models)
    model_a = load_classifier(models / "attribute.ckpt")
    model_e = load_classifier(models / "expression.ckpt")
    clf_config = ClassifierConfig(
        image_size=model.config.image_size,
        base_channels=model_a.config.base_channels,
        epochs=args.eval_epochs,
        master_seed=args.seed,
    )
    scaled = {
        t: scale_topic_vector(vector_set[t], args.scale_cond, args.scale_lat)
        for t in vector_set.topics
    }
    report = full_evaluation(
        model,
        vector_set,
        scaled,
        model_a,
        model_e,
        load_manifest(args.train_manifest),
        load_manifest(args.test_manifest),
        clf_config,
        seed=args.seed,
        provenance={"model": sha256_file(args.checkpoint), "vectors": sha256_file(args.vectors)},
    )
    report.save(args.out)
    print(f"topic prediction accuracy {report.topic_prediction_accuracy:.4f}")
    for name, value in report.baselines.items():
        print(f"baseline {name}: {value:.4f}")
    print(f"oracle transform accuracy {report.oracle_topic_accuracy:.4f}")
    print(f"round trip: {report.round_trip_attribute_agreement:.3f} attribute, "
          f"{report.round_trip_expression_accuracy:.3f} expression")
    print(f"wrote {args.out}")
    return 0


def cmd_grid(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    vector_set = TopicVectorSet.load(args.vectors)
    scaled = {
        t: scale_topic_vector(vector_set[t], args.scale_cond, args.scale_lat)
        for t in vector_set.topics
    }
    scaled_set = TopicVectorSet(vectors=scaled, provenance=vector_set.provenance)
    export_grid(model, scaled_set, load_manifest(args.manifest), args.out, args.faces)
    print(f"wrote {args.out}")
    return 0


GRADCHECK_TOLERANCES = {"kl": 1e-4, "reconstruction": 1e-2, "conditional": 1e-2, "composite": 1e-2}


def cmd_gradcheck(args) -> int:
    report = tiny_gradcheck_report(seed=args.seed)
    ok = True
    for loss_name, tensors in report.items():
        tol = GRADCHECK_TOLERANCES[loss_name]
        for tensor_name, err in sorted(tensors.items()):
            status = "ok" if err < tol else "FAIL"
            if err >= tol:
                ok = False
            print(f"{loss_name:<14} {tensor_name:<40} {err:.3e}  {status}")
    print("gradient check " + ("passed" if ok else "FAILED"))
    return 0 if ok else 2


def cmd_run(args) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        d = config.to_dict()
        d["seed"] = args.seed
        config = RunConfig.from_dict(d)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    stages = args.stages.split(",") if args.stages else None
    pipeline = Pipeline(config, args.workdir, force=args.force)
    for result in pipeline.run(stages):
        status = "skipped (up to date)" if result.skipped else "done"
        print(f"{result.name}: {status}")
    print(f"config hash {config_hash(config.to_dict())}")
    return 0


def _add_seed(p, default=0):
    p.add_argument("--seed", type=int, default=default, help="master seed (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advae", description=__doc__, epilog=EPILOG)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic face corpus", epilog=EPILOG)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--topics", help="topic count or comma-separated names (default: all)")
    p.add_argument("--per-topic", type=int, default=200)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-classifiers", help="train attribute and expression classifiers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for attribute.ckpt / expression.ckpt")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--image-size", type=int, default=64)
    _add_seed(p)
    p.set_defaults(func=cmd_train_classifiers)

    p = sub.add_parser("label", help="attach classifier predictions to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True, help="directory with classifier checkpoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the conditional VAE", epilog=EPILOG)
    p.add_argument("--manifest", required=True, help="labeled manifest")
    p.add_argument("--models", required=True, help="directory with classifier checkpoints")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--epochs", type=int, default=30, help="default %(default)s (reference: 200)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--alpha", type=float, default=1.0, help="reconstruction weight")
    p.add_argument("--beta", type=float, default=DESK_WEIGHTS["beta"],
                   help="conditional weight (default %(default)s; reference 1e-4)")
    p.add_argument("--gamma", type=float, default=DESK_WEIGHTS["gamma"],
                   help="KL weight (default %(default)s; reference 1e-4)")
    p.add_argument("--latent-dim", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--conditional-target", choices=["decoder_input", "source_prediction"],
                   default="decoder_input")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--workdir", help="directory for rolling checkpoints (default: out's directory)")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("topic-vectors", help="compute per-topic transformation vectors")
    p.add_argument("--manifest", required=True, help="labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_topic_vectors)

    p = sub.add_parser("transform", help="transform one face into a topic")
    p.add_argument("--input", required=True, help="source PNG at model size")
    p.add_argument("--topic", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--models", required=True, help="classifier checkpoint directory")
    p.add_argument("--scale-cond", type=float, default=10.0)
    p.add_argument("--scale-lat", type=float, default=2.5)
    p.add_argument("--out", help="default: INPUT.TOPIC.png")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("eval", help="run the topic-prediction protocol and round trips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale-cond", type=float, default=10.0)
    p.add_argument("--scale-lat", type=float, default=2.5)
    p.add_argument("--eval-epochs", type=int, default=4)
    p.add_argument("--force", action="store_true", help="skip provenance checks")
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="export an original/reconstruction/transform grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--faces", type=int, default=4)
    p.add_argument("--scale-cond", type=float, default=10.0)
    p.add_argument("--scale-lat", type=float, default=2.5)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="run the staged pipeline from a config file", epilog=EPILOG)
    p.add_argument("--config", help="JSON run config (default: built-in desk-scale config)")
    p.add_argument("--workdir", default="runs/desk")
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.add_argument("--force", action="store_true", help="ignore up-to-date artifacts")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--seed", type=int, default=None, help="override the config master seed")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
        datefmt="%H:%M:%S",
    )
    try:
        return args.func(args)
    except AdvaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
