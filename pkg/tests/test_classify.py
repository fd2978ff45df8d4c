import numpy as np
import pytest

from sigmap.classify import (
    DimensionMismatch,
    EmptyTrainingSet,
    FamilyModelSet,
    ModelMismatch,
    baseline_classify,
    classify,
    config_fingerprint,
    fit_family_models,
    load_models,
    save_models,
    score_families,
)
from sigmap.extraction import ConstantMatch
from sigmap.hierarchy import HierarchicalDescriptor


def desc(values, version=1):
    return HierarchicalDescriptor(values=np.asarray(values, dtype=float), layout_version=version)


def test_single_sample_family_centroid_only():
    x = np.array([[1.0, 2.0, 3.0]])
    models = fit_family_models(x, ["a"], q=2)
    assert models.families == ["a"]
    assert np.allclose(models.models[0].centroid, [1, 2, 3])
    assert models.models[0].basis.shape == (0, 3)


def test_two_identical_samples_score_equivalence():
    x = np.array([[1.0, 0.0], [1.0, 0.0]])
    models = fit_family_models(x, ["a", "a"])
    scores = score_families(np.array([1.0, 0.0]), models)
    assert scores["a"] == pytest.approx(0.0, abs=1e-12)


def test_fit_validation_errors():
    with pytest.raises(EmptyTrainingSet):
        fit_family_models(np.zeros((0, 3)), [])
    with pytest.raises(DimensionMismatch):
        fit_family_models(np.zeros((2, 3)), ["a"])


def test_fit_is_training_order_invariant(small_matrix):
    x, labels = small_matrix
    rng = np.random.default_rng(17)
    perm = rng.permutation(len(labels))
    a = fit_family_models(x, labels)
    b = fit_family_models(x[perm], [labels[i] for i in perm])
    for fam in a.families:
        ma = next(m for m in a.models if m.family == fam)
        mb = next(m for m in b.models if m.family == fam)
        assert np.allclose(ma.centroid, mb.centroid, atol=1e-10)
        # bases may differ by sign/rotation only when eigenvalues tie; compare projectors
        pa = ma.basis.T @ ma.basis
        pb = mb.basis.T @ mb.basis
        assert np.allclose(pa, pb, atol=1e-7)


def test_classify_centroid_maps_to_own_family():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 1, (10, 6)), rng.normal(5, 1, (10, 6))])
    labels = ["a"] * 10 + ["b"] * 10
    models = fit_family_models(x, labels)
    for m in models.models:
        family, scores = classify(desc(m.centroid), models)
        assert family == m.family
        assert scores[m.family] == pytest.approx(0.0, abs=1e-12)


def test_classify_tie_breaks_to_earlier_family():
    models = fit_family_models(np.array([[0.0, 0.0], [2.0, 0.0]]), ["first", "second"])
    family, scores = classify(desc([1.0, 0.0]), models)
    assert scores["first"] == pytest.approx(scores["second"])
    assert family == "first"


def test_classify_projects_out_within_family_variation():
    rng = np.random.default_rng(3)
    base = np.zeros(8)
    direction = np.zeros(8)
    direction[2] = 1.0
    spread = np.array([base + t * direction for t in (-2, -1, 0, 1, 2)])
    far = rng.normal(6.0, 0.1, (5, 8))
    models = fit_family_models(np.vstack([spread, far]), ["a"] * 5 + ["b"] * 5)
    moved = base + 1.7 * direction
    scores = score_families(moved, models)
    assert scores["a"] == pytest.approx(0.0, abs=1e-9)  # variation removed by the basis
    assert scores["b"] < -1.0
    assert classify(desc(moved), models)[0] == "a"


def test_classify_layout_version_mismatch():
    models = fit_family_models(np.zeros((2, 3)), ["a", "a"])
    with pytest.raises(ModelMismatch):
        classify(desc([0, 0, 0], version=2), models)
    with pytest.raises(ModelMismatch):
        classify(desc([0, 0]), models)


def test_prediction_invariant_under_appended_constant_slot(small_matrix):
    x, labels = small_matrix
    models = fit_family_models(x, labels)
    preds = [classify(desc(row), models)[0] for row in x]
    augmented = np.hstack([x, np.full((x.shape[0], 1), 0.37)])
    models_aug = fit_family_models(augmented, labels)
    preds_aug = [classify(desc(row), models_aug)[0] for row in augmented]
    assert preds == preds_aug


# -- baseline ---------------------------------------------------------------

def match(constant_id, score=1.0, offset=0, length=16):
    return ConstantMatch(constant_id, offset, score, length)


def test_baseline_rule_table():
    assert baseline_classify([match("aes_sbox")]) == "locker_aes"
    assert baseline_classify([]) == "benign"
    assert baseline_classify([match("aes_sbox"), match("rsa_e")]) == "hybrid_aes_rsa"
    assert baseline_classify([match("chacha_sigma")]) == "wiper_chacha"
    assert baseline_classify([match("rsa_e")]) == "crypto_rsa"
    assert baseline_classify([match("aes_sbox", score=0.5)]) == "benign"  # below threshold
    assert baseline_classify([match("aes_sbox_q1")]) == "locker_aes"


# -- model io -----------------------------------------------------------------

def test_model_roundtrip(tmp_path, small_matrix):
    x, labels = small_matrix
    models = fit_family_models(x, labels)
    models.config_text = "[corpus]\n"
    models.config_fingerprint = config_fingerprint(models.config_text)
    path = tmp_path / "models.json"
    save_models(models, path)
    loaded = load_models(path)
    assert loaded.families == models.families
    assert loaded.layout_version == models.layout_version
    assert loaded.config_fingerprint == models.config_fingerprint
    for ma, mb in zip(models.models, loaded.models):
        assert np.allclose(ma.centroid, mb.centroid)
        assert np.allclose(ma.basis, mb.basis)
    save_models(models, path)
    assert load_models(path).families == models.families


def test_model_file_corruption_detected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"layout_version": 1}')
    with pytest.raises(ModelMismatch):
        load_models(path)
