"""Acceptance gate: the nine shipped checks, one test per criterion.

Criteria 1-4 and 9 run at property scale. Criteria 5-8 plus the full-size
transform and protocol checks share one complete pipeline run (5 topics x
200 images, size 64, 30 epochs) built fresh per session with the default
RunConfig, so the shipped defaults are exactly what gets graded.

Thresholds were confirmed on the initial baseline run and are frozen here
and in the README.
"""

import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from advae.checkpoint import load_checkpoint, load_classifier, save_checkpoint
from advae.conditional import EXPRESSIONS
from advae.cvae import LatentParams, decode_batch, encode, encode_batch, reparameterize
from advae.dataset import DatasetManifest, load_manifest
from advae.evaluate import EvalReport
from advae.labeling import ATTRIBUTE_NAMES
from advae.losses import LossWeights, kl_loss
from advae.pipeline import Pipeline, RunConfig
from advae.trainer import model_from_checkpoint, tiny_gradcheck_report, train_cvae
from advae.transform import TopicVectorSet, scale_topic_vector, transform_batch

from conftest import TINY_BASE, TINY_LATENT, TINY_SIZE

HAPPY = EXPRESSIONS.index("happy")

# frozen after the initial baseline run (smiling 0.97, happy->sad 0.76,
# protocol 0.47 vs identity 0.20 / latent-only 0.21, oracle 1.00)
SMILING_FLIP_MIN = 0.70
HAPPY_TO_SAD_MIN = 0.60
ORACLE_TOPIC_MIN = 0.60
BASELINE_MARGIN = 0.05
TRAIN_MAE_MAX = 0.08


def criterion(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n} failed: {detail}"


# ------------------------------------------------------------ shared desk run


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("desk")
    config = RunConfig()
    start = time.monotonic()
    Pipeline(config, workdir).run()
    elapsed = time.monotonic() - start
    ckpt = load_checkpoint(workdir / "models" / "cvae.ckpt")
    return SimpleNamespace(
        config=config,
        workdir=workdir,
        elapsed=elapsed,
        history=ckpt.history,
        model=model_from_checkpoint(ckpt),
        report=EvalReport.load(workdir / "artifacts" / "eval.json"),
        vectors=TopicVectorSet.load(workdir / "artifacts" / "topic_vectors.json"),
        train=load_manifest(workdir / "data" / "train_labeled.jsonl"),
        test=load_manifest(workdir / "data" / "test_labeled.jsonl"),
        model_a=load_classifier(workdir / "models" / "attribute.ckpt"),
        model_e=load_classifier(workdir / "models" / "expression.ckpt"),
    )


def scaled_vectors(desk):
    return {
        t: scale_topic_vector(desk.vectors[t], desk.config.conditional_scale, desk.config.latent_scale)
        for t in desk.vectors.topics
    }


def embedding_rows(model, manifest, records):
    xs = np.stack([manifest.load_image(r) for r in records])
    ys = np.stack([manifest.model_labels(r).to_array() for r in records])
    mu, _ = encode_batch(model, xs)
    return xs, ys, np.concatenate([ys, mu], axis=1)


# ------------------------------------------------------------ criteria 1-4


def test_criterion_1_kl_closed_form_matches_monte_carlo():
    start = time.monotonic()
    rng = np.random.default_rng(418)
    n_pairs, n_samples = 1000, 200_000
    mu = rng.uniform(1.0, 2.0, n_pairs) * rng.choice([-1.0, 1.0], n_pairs)
    log_var = rng.uniform(-0.8, 0.8, n_pairs)

    closed = np.array(
        [float(kl_loss(np.array([m]), np.array([lv]))) for m, lv in zip(mu, log_var)]
    )

    # antithetic pairs keep the estimator variance well inside the 2% band
    estimates = np.empty(n_pairs)
    half = n_samples // 2
    for lo in range(0, n_pairs, 50):
        hi = min(lo + 50, n_pairs)
        eps = rng.standard_normal((hi - lo, half))
        m = mu[lo:hi, None]
        s = np.exp(log_var[lo:hi, None] / 2.0)
        lv = log_var[lo:hi, None]
        total = np.zeros(hi - lo)
        for signed in (eps, -eps):
            z = m + s * signed
            # log q(z|x) - log p(z) with the 2-pi terms cancelling
            total += (-0.5 * lv - 0.5 * signed**2 + 0.5 * z**2).mean(axis=1)
        estimates[lo:hi] = total / 2.0

    rel = np.abs(estimates - closed) / closed
    at_origin = float(kl_loss(np.zeros(1), np.zeros(1)))
    runtime = time.monotonic() - start
    criterion(
        1,
        rel.max() < 0.02 and at_origin == 0.0 and runtime < 60.0,
        f"max rel err {rel.max():.4f}, kl(0,0)={at_origin}, {runtime:.1f}s",
    )


def test_criterion_2_reparameterization_statistics():
    rng = np.random.default_rng(52)
    mu = np.array([1.0, -1.5, 2.0, -1.0, 1.25, -2.0, 1.75, -1.25], dtype=np.float32)
    log_var = np.linspace(-1.0, 1.0, 8).astype(np.float32)
    params = LatentParams(mu=mu, log_var=log_var)

    draws = np.empty((100_000, 8), dtype=np.float64)
    for i in range(draws.shape[0]):
        draws[i] = reparameterize(params, rng.standard_normal(8)).z
    mean_err = np.abs(draws.mean(axis=0) - mu) / np.abs(mu)
    var_err = np.abs(draws.var(axis=0) - np.exp(log_var)) / np.exp(log_var)

    exact = reparameterize(params, np.zeros(8)).z
    criterion(
        2,
        mean_err.max() < 0.02 and var_err.max() < 0.02 and np.array_equal(exact, mu),
        f"mean err {mean_err.max():.4f}, var err {var_err.max():.4f}, eps=0 exact {np.array_equal(exact, mu)}",
    )


def test_criterion_3_gradient_checks():
    start = time.monotonic()
    report = tiny_gradcheck_report(seed=0)
    tolerances = {"kl": 1e-4, "reconstruction": 1e-2, "conditional": 1e-2, "composite": 1e-2}
    worst = {name: max(errs.values()) for name, errs in report.items()}
    runtime = time.monotonic() - start
    ok = all(worst[name] < tol for name, tol in tolerances.items()) and runtime < 300.0
    criterion(3, ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) + f", {runtime:.1f}s")


def test_criterion_4_single_batch_overfit(tiny_labeled, tiny_classifiers, tiny_training_config):
    start = time.monotonic()
    eight = DatasetManifest(
        config=tiny_labeled.config, records=tiny_labeled.records[:8], root=tiny_labeled.root
    )
    config = replace(
        tiny_training_config,
        epochs=300,
        batch_size=8,
        learning_rate=1e-3,
        weights=LossWeights(alpha=1.0, beta=0.0, gamma=0.0),
    )
    model_a, model_e = tiny_classifiers
    _, history = train_cvae(config, eight, model_a, model_e)
    first, last = history[0].reconstruction, history[-1].reconstruction
    runtime = time.monotonic() - start
    criterion(
        4,
        last < 0.1 * first and runtime < 300.0,
        f"recon {first:.5f} -> {last:.5f} ({last / first:.1%}), {runtime:.1f}s",
    )


# ------------------------------------------------------------ criteria 5-8


def test_criterion_5_desk_training_budget_and_reconstruction(desk):
    first, last = desk.history[0]["total"], desk.history[-1]["total"]
    maes = []
    for lo in range(0, len(desk.train.records), 100):
        block = desk.train.records[lo : lo + 100]
        xs, ys, rows = embedding_rows(desk.model, desk.train, block)
        maes.append(np.abs(decode_batch(desk.model, rows) - xs).mean())
    mae = float(np.mean(maes))
    ok = (
        desk.elapsed < 1800.0
        and len(desk.history) == 30
        and last < 0.5 * first
        and mae <= TRAIN_MAE_MAX
    )
    criterion(
        5,
        ok,
        f"{desk.elapsed / 60:.1f} min, total {first:.4f} -> {last:.4f} "
        f"({last / first:.1%}), train MAE {mae:.4f}",
    )


def test_criterion_6_round_trip_flips(desk):
    smiling = desk.report.round_trip["attribute:smiling=toggle"]
    sad = desk.report.round_trip["expression:happy->sad"]
    ok = (
        smiling["count"] == 100
        and smiling["realized"] >= SMILING_FLIP_MIN
        and sad["realized"] >= HAPPY_TO_SAD_MIN
    )
    criterion(
        6,
        ok,
        f"smiling {smiling['realized']:.2f} of {smiling['count']}, "
        f"happy->sad {sad['realized']:.2f} of {sad['count']}",
    )


def test_criterion_7_topic_transformation(desk):
    # independent re-derivation of the mean-difference vectors
    rows, topics = [], []
    for rec in desk.train.records:
        mu = encode(desk.model, desk.train.load_image(rec)).mu.astype(np.float64)
        y = desk.train.model_labels(rec).to_array().astype(np.float64)
        rows.append(np.concatenate([y, mu]))
        topics.append(rec.topic)
    rows = np.stack(rows)
    topics = np.array(topics)
    worst = 0.0
    for t in desk.vectors.topics:
        mask = topics == t
        brute = rows[mask].mean(axis=0) - rows[~mask].mean(axis=0)
        v = desk.vectors[t]
        got = np.concatenate([v.conditional_part, v.latent_part])
        worst = max(worst, float(np.abs(got - brute).max()))
    oracle = desk.report.oracle_topic_accuracy
    criterion(
        7,
        oracle >= ORACLE_TOPIC_MIN and worst < 1e-6,
        f"oracle accuracy {oracle:.3f}, brute-force gap {worst:.2e}",
    )


def test_criterion_8_protocol_beats_both_baselines(desk):
    full = desk.report.topic_prediction_accuracy
    identity = desk.report.baselines["identity"]
    latent_only = desk.report.baselines["latent_only"]
    ok = full >= identity + BASELINE_MARGIN and full >= latent_only + BASELINE_MARGIN
    criterion(
        8,
        ok,
        f"full {full:.3f} vs identity {identity:.3f} and latent-only {latent_only:.3f}",
    )


# ------------------------------------------------------------ criterion 9


def test_criterion_9_determinism_and_persistence(
    tmp_path, tiny_labeled, tiny_classifiers, tiny_training_config
):
    model_a, model_e = tiny_classifiers
    config = replace(tiny_training_config, epochs=3)

    _, history_a = train_cvae(config, tiny_labeled, model_a, model_e)
    _, history_b = train_cvae(config, tiny_labeled, model_a, model_e)
    same_seed = history_a == history_b

    straight_dir = tmp_path / "straight"
    straight_dir.mkdir()
    model_s, history_s = train_cvae(
        config, tiny_labeled, model_a, model_e, workdir=straight_dir
    )
    part_dir = tmp_path / "resumed"
    part_dir.mkdir()
    train_cvae(replace(config, epochs=1), tiny_labeled, model_a, model_e, workdir=part_dir)
    resumed = load_checkpoint(part_dir / "cvae_last.ckpt")
    model_r, history_r = train_cvae(
        config, tiny_labeled, model_a, model_e, resume=resumed, workdir=part_dir
    )
    gap = max(
        abs(av - bv)
        for a, b in zip(history_s, history_r)
        for av, bv in zip(a.to_dict().values(), b.to_dict().values())
    )
    params_close = all(
        torch.allclose(p, q, atol=1e-6)
        for p, q in zip(model_s.parameters(), model_r.parameters())
    )

    final = load_checkpoint(straight_dir / "cvae_last.ckpt")
    copy_path = tmp_path / "copy.ckpt"
    save_checkpoint(copy_path, final)
    reload_path = tmp_path / "reload.ckpt"
    save_checkpoint(reload_path, load_checkpoint(copy_path))
    bitwise = copy_path.read_bytes() == reload_path.read_bytes()

    criterion(
        9,
        same_seed and gap <= 1e-6 and params_close and bitwise,
        f"same-seed {same_seed}, resume gap {gap:.2e}, params {params_close}, bitwise {bitwise}",
    )


# ------------------------------------- full-size module examples (same run)


def test_desk_classifier_quality(desk):
    attr = load_checkpoint(desk.workdir / "models" / "attribute.ckpt").meta["metrics"]
    expr = load_checkpoint(desk.workdir / "models" / "expression.ckpt").meta["metrics"]
    assert attr["val_attribute_accuracy"] >= 0.9
    assert expr["val_expression_accuracy"] >= 0.85
    assert expr["val_valence_mse"] <= 0.05
    assert expr["val_valence_pearson"] >= 0.9


def test_desk_round_trip_baseline_agreement(desk):
    baseline = desk.report.round_trip["baseline"]
    assert baseline["attribute_agreement"] >= 0.9
    assert baseline["expression_accuracy"] >= 0.9


def test_desk_protocol_baseline_shape(desk):
    identity = desk.report.baselines["identity"]
    permutation = desk.report.baselines["permutation"]
    assert abs(identity - permutation) <= 0.1
    assert desk.report.topic_prediction_accuracy > 0.3


def test_desk_transform_to_distress_topic_suppresses_smiles(desk):
    from advae.classifiers import predict_conditional_batch

    records = desk.test.records[:100]
    xs, ys, _ = embedding_rows(desk.model, desk.test, records)
    v = scaled_vectors(desk)["domestic_violence"]
    out = transform_batch(desk.model, xs, ys, v)
    preds = predict_conditional_batch(desk.model_a, desk.model_e, out)
    expr = preds[:, len(ATTRIBUTE_NAMES) : len(ATTRIBUTE_NAMES) + len(EXPRESSIONS)]
    non_happy = float((expr.argmax(axis=1) != HAPPY).mean())
    assert non_happy >= 0.70, f"non-happy fraction {non_happy:.2f}"


def test_desk_transform_direction_is_topic_consistent(desk):
    from advae.classifiers import predict_conditional_batch

    scaled = scaled_vectors(desk)
    records = desk.test.records[:100]
    xs, ys, q_in = embedding_rows(desk.model, desk.test, records)
    hits = total = 0
    directions = {
        t: np.concatenate([v.conditional_part, v.latent_part]) for t, v in scaled.items()
    }
    for t, v in scaled.items():
        out = transform_batch(desk.model, xs, ys, v)
        y_out = predict_conditional_batch(desk.model_a, desk.model_e, out)
        mu_out, _ = encode_batch(desk.model, out)
        delta = np.concatenate([y_out, mu_out], axis=1) - q_in
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        cos = {
            s: (delta @ d) / (norms[:, 0] * np.linalg.norm(d) + 1e-12)
            for s, d in directions.items()
        }
        stacked = np.stack([cos[s] for s in desk.vectors.topics], axis=1)
        winners = np.array(desk.vectors.topics)[stacked.argmax(axis=1)]
        hits += int((winners == t).sum())
        total += len(records)
    assert hits / total >= 0.60, f"direction consistency {hits / total:.2f}"
