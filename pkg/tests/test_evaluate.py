import numpy as np
import pytest

from advae.classifiers import ClassifierConfig
from advae.conditional import EXPRESSIONS
from advae.cvae import decode_batch, encode_batch
from advae.dataset import load_image_png
from advae.errors import ArtifactError, DomainError, ProtocolError
from advae.evaluate import (
    EvalReport,
    FlipSpec,
    apply_flip,
    export_grid,
    full_evaluation,
    round_trip_fidelity,
    topic_prediction_protocol,
)
from advae.labeling import ATTRIBUTE_NAMES
from advae.transform import compute_topic_vectors, scale_topic_vector, zero_topic_vector

from conftest import TINY_SIZE, TINY_TOPICS

SMILE = ATTRIBUTE_NAMES.index("smiling")


def eval_clf_config():
    return ClassifierConfig(
        image_size=TINY_SIZE, base_channels=8, epochs=2, batch_size=16, use_augment=False
    )


@pytest.fixture(scope="module")
def tiny_eval_assets(tiny_trained_cvae, tiny_labeled):
    model, _ = tiny_trained_cvae
    vectors = compute_topic_vectors(model, tiny_labeled)
    scaled = {t: scale_topic_vector(vectors[t]) for t in vectors.topics}
    return model, vectors, scaled


def smiling_vector(tiny_labeled, value):
    for r in tiny_labeled.records:
        if r.labels.attributes[SMILE] == value:
            return tiny_labeled.model_labels(r)
    raise AssertionError("fixture corpus lacks a face with that smiling bit")


def test_flip_smiling_toggle_zero_to_one(tiny_labeled):
    y = smiling_vector(tiny_labeled, 0.0)
    flipped, target = apply_flip(y, FlipSpec(kind="attribute", name="smiling"))
    assert target == 1
    assert flipped.attributes[SMILE] == 1.0
    assert flipped.expression_name() == "happy"
    assert flipped.valence == 0.5
    assert flipped.arousal == y.arousal  # untouched


def test_flip_smiling_toggle_one_to_zero(tiny_labeled):
    y = smiling_vector(tiny_labeled, 1.0)
    flipped, target = apply_flip(y, FlipSpec(kind="attribute", name="smiling"))
    assert target == 0
    assert flipped.attributes[SMILE] == 0.0
    assert flipped.expression_name() == "neutral"
    assert flipped.valence == 0.0


def test_flip_explicit_value_and_untied(tiny_labeled):
    y = smiling_vector(tiny_labeled, 1.0)
    flipped, target = apply_flip(y, FlipSpec(kind="attribute", name="smiling", value=1))
    assert target == 1 and flipped.attributes[SMILE] == 1.0

    untied, _ = apply_flip(y, FlipSpec(kind="attribute", name="smiling", tied=False))
    assert untied.attributes[SMILE] == 0.0
    assert untied.valence == y.valence  # untied edit leaves the rest alone
    assert np.array_equal(untied.expression, y.expression)


def test_flip_other_attributes_do_not_touch_expression(tiny_labeled):
    y = tiny_labeled.model_labels(tiny_labeled.records[0])
    flipped, _ = apply_flip(y, FlipSpec(kind="attribute", name="lipstick"))
    assert np.array_equal(flipped.expression, y.expression)
    assert flipped.valence == y.valence


def test_flip_expression_happy_to_sad(tiny_labeled):
    y = smiling_vector(tiny_labeled, 1.0)
    flipped, target = apply_flip(y, FlipSpec(kind="expression", name="sad", source="happy"))
    assert target == EXPRESSIONS.index("sad")
    assert flipped.expression_name() == "sad"
    assert flipped.valence == -0.5
    assert flipped.attributes[SMILE] == 0.0


def test_flip_errors(tiny_labeled):
    y = tiny_labeled.model_labels(tiny_labeled.records[0])
    with pytest.raises(DomainError, match="attribute"):
        apply_flip(y, FlipSpec(kind="attribute", name="halo"))
    with pytest.raises(DomainError, match="expression"):
        apply_flip(y, FlipSpec(kind="expression", name="smug"))
    with pytest.raises(DomainError, match="kind"):
        apply_flip(y, FlipSpec(kind="wavelength", name="smiling"))


def test_flip_labels():
    assert FlipSpec(kind="attribute", name="smiling").label() == "attribute:smiling=toggle"
    assert FlipSpec(kind="attribute", name="smiling", value=0).label() == "attribute:smiling=0"
    assert (
        FlipSpec(kind="expression", name="sad", source="happy").label()
        == "expression:happy->sad"
    )
    assert FlipSpec(kind="expression", name="sad").label() == "expression:any->sad"


def test_protocol_rejects_overlapping_splits(tiny_eval_assets, tiny_labeled):
    model, _, scaled = tiny_eval_assets
    with pytest.raises(ProtocolError, match="share"):
        topic_prediction_protocol(model, scaled, tiny_labeled, tiny_labeled, eval_clf_config())


def test_protocol_confusion_accounting(tiny_eval_assets, tiny_split):
    model, _, scaled = tiny_eval_assets
    train, test = tiny_split
    acc, confusion = topic_prediction_protocol(model, scaled, train, test, eval_clf_config())
    t = len(TINY_TOPICS)
    assert confusion.shape == (t, t)
    assert confusion.sum() == len(test.records)
    # rows sum to per-topic test counts, in sorted topic order
    topics = sorted(TINY_TOPICS)
    for ti, topic in enumerate(topics):
        assert confusion[ti].sum() == sum(1 for r in test.records if r.topic == topic)
    assert acc == pytest.approx(np.trace(confusion) / confusion.sum())


def test_round_trip_baseline_is_reconstruction_consistency(
    tiny_eval_assets, tiny_classifiers, tiny_split
):
    model, _, _ = tiny_eval_assets
    ma, me = tiny_classifiers
    _, test = tiny_split
    results = round_trip_fidelity(model, ma, me, test, flips=[])
    assert set(results) == {"baseline"}
    base = results["baseline"]
    assert base["count"] == len(test.records)
    assert 0.0 <= base["attribute_agreement"] <= 1.0
    assert 0.0 <= base["expression_accuracy"] <= 1.0


def test_round_trip_reports_each_flip(tiny_eval_assets, tiny_classifiers, tiny_split):
    model, _, _ = tiny_eval_assets
    ma, me = tiny_classifiers
    _, test = tiny_split
    flips = [
        FlipSpec(kind="attribute", name="smiling"),
        FlipSpec(kind="expression", name="sad", source="happy"),
    ]
    results = round_trip_fidelity(model, ma, me, test, flips)
    assert set(results) == {"baseline", "attribute:smiling=toggle", "expression:happy->sad"}
    for key in ("attribute:smiling=toggle", "expression:happy->sad"):
        entry = results[key]
        if entry["count"]:
            assert 0.0 <= entry["realized"] <= 1.0


def test_round_trip_missing_source_expression(tiny_eval_assets, tiny_classifiers, tiny_split):
    model, _, _ = tiny_eval_assets
    ma, me = tiny_classifiers
    _, test = tiny_split
    results = round_trip_fidelity(
        model, ma, me, test, [FlipSpec(kind="expression", name="sad", source="contempt")]
    )
    entry = results["expression:contempt->sad"]
    assert entry["count"] == 0 and np.isnan(entry["realized"])


def test_grid_layout_and_reconstruction_column(tiny_eval_assets, tiny_labeled, tmp_path):
    model, vectors, _ = tiny_eval_assets
    path = export_grid(model, vectors, tiny_labeled, tmp_path / "grid.png", num_faces=4)
    grid = load_image_png(path)
    t = len(TINY_TOPICS)
    assert grid.shape == (3, 4 * TINY_SIZE, (2 + t) * TINY_SIZE)

    records = tiny_labeled.records[:4]
    images = np.stack([tiny_labeled.load_image(r) for r in records])
    y_rows = np.stack([tiny_labeled.model_labels(r).to_array() for r in records])
    mu, _ = encode_batch(model, images)
    recon = decode_batch(model, np.concatenate([y_rows.astype(np.float32), mu], axis=1))
    col0 = grid[:, :, 0:TINY_SIZE]
    col1 = grid[:, :, TINY_SIZE : 2 * TINY_SIZE]
    for row in range(4):
        sl = slice(row * TINY_SIZE, (row + 1) * TINY_SIZE)
        # column 0 carries the source pixels; png round trip is exact for
        # values that came from 8-bit files
        assert np.array_equal(col0[:, sl, :], images[row])
        # column 1 equals the reconstruction after the shared 8-bit write
        expected = np.round(np.clip(recon[row], 0, 1) * 255) / 255
        assert np.allclose(col1[:, sl, :], expected, atol=1e-6)


def test_grid_rerun_is_byte_identical(tiny_eval_assets, tiny_labeled, tmp_path):
    model, vectors, _ = tiny_eval_assets
    p1 = export_grid(model, vectors, tiny_labeled, tmp_path / "g1.png", num_faces=2)
    p2 = export_grid(model, vectors, tiny_labeled, tmp_path / "g2.png", num_faces=2)
    assert p1.read_bytes() == p2.read_bytes()


def test_grid_requires_records(tiny_eval_assets, tiny_labeled, tmp_path):
    from advae.dataset import DatasetManifest

    model, vectors, _ = tiny_eval_assets
    empty = DatasetManifest(config=tiny_labeled.config, records=[], root=tiny_labeled.root)
    with pytest.raises(DomainError, match="records"):
        export_grid(model, vectors, empty, tmp_path / "g.png")


def test_eval_report_validation():
    report = EvalReport(
        topics=["a", "b"],
        topic_prediction_accuracy=0.875,
        confusion=[[3, 1], [0, 4]],
        baselines={"identity": 0.5},
        oracle_topic_accuracy=0.9,
        round_trip_attribute_agreement=0.8,
        round_trip_expression_accuracy=0.7,
        round_trip={},
    )
    report.validate()
    report.topic_prediction_accuracy = 0.5  # now inconsistent with the matrix
    with pytest.raises(DomainError, match="inconsistent"):
        report.validate()
    report.confusion = [[1, 2, 3]]
    with pytest.raises(DomainError, match="shape"):
        report.validate()


def test_eval_report_round_trip(tmp_path):
    report = EvalReport(
        topics=["a", "b"],
        topic_prediction_accuracy=0.875,
        confusion=[[4, 0], [1, 3]],
        baselines={"identity": 0.5, "latent_only": 0.375, "permutation": 0.5},
        oracle_topic_accuracy=1.0,
        round_trip_attribute_agreement=0.75,
        round_trip_expression_accuracy=0.5,
        round_trip={"baseline": {"count": 8}},
        provenance={"model_hash": "m", "manifest_hash": "d"},
    )
    path = report.save(tmp_path / "eval.json")
    back = EvalReport.load(path)
    assert back.to_json_dict() == report.to_json_dict()
    p2 = back.save(tmp_path / "eval2.json")
    assert path.read_bytes() == p2.read_bytes()


def test_eval_report_load_rejects_bad_format(tmp_path):
    p = tmp_path / "e.json"
    p.write_text('{"format": "other/1"}', encoding="utf-8")
    with pytest.raises(ArtifactError, match="format"):
        EvalReport.load(p)


def test_full_evaluation_assembles_report(
    tiny_eval_assets, tiny_classifiers, tiny_split
):
    model, vectors, scaled = tiny_eval_assets
    ma, me = tiny_classifiers
    train, test = tiny_split
    report = full_evaluation(
        model,
        vectors,
        scaled,
        ma,
        me,
        train,
        test,
        clf_config=eval_clf_config(),
        provenance={"model_hash": "x"},
    )
    report.validate()
    assert report.topics == sorted(TINY_TOPICS)
    assert set(report.baselines) == {"identity", "latent_only", "permutation"}
    assert 0.0 <= report.topic_prediction_accuracy <= 1.0
    assert 0.0 <= report.oracle_topic_accuracy <= 1.0
    assert "baseline" in report.round_trip
    assert report.provenance == {"model_hash": "x"}


def test_full_evaluation_is_deterministic(tiny_eval_assets, tiny_classifiers, tiny_split):
    model, vectors, scaled = tiny_eval_assets
    ma, me = tiny_classifiers
    train, test = tiny_split
    kwargs = dict(clf_config=eval_clf_config(), seed=3)
    r1 = full_evaluation(model, vectors, scaled, ma, me, train, test, **kwargs)
    r2 = full_evaluation(model, vectors, scaled, ma, me, train, test, **kwargs)
    assert r1.to_json_dict() == r2.to_json_dict()
