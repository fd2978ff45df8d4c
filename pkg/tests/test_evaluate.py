import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigmap.classify import fit_family_models
from sigmap.corpus import CorpusError
from sigmap.evaluate import (
    LengthMismatch,
    SingleClass,
    compute_metrics,
    feature_importance,
    run_evaluation,
    stratified_split,
)


def brute_force_information_gain(column, labels, bins=8):
    """Contingency-table oracle: pure-python entropy sums over (bin, label)."""
    lo, hi = min(column), max(column)
    if hi <= lo:
        return 0.0
    width = (hi - lo) / bins
    assigned = [min(int((v - lo) / width), bins - 1) for v in column]

    def entropy(counter, total):
        return -sum((c / total) * math.log2(c / total) for c in counter.values() if c)

    n = len(labels)
    h_y = entropy(Counter(labels), n)
    cond = 0.0
    for b in set(assigned):
        rows = [labels[i] for i in range(n) if assigned[i] == b]
        cond += (len(rows) / n) * entropy(Counter(rows), len(rows))
    return max(h_y - cond, 0.0)


# -- metrics -------------------------------------------------------------------

def test_metrics_perfect_predictions():
    rep = compute_metrics(["a", "b", "a"], ["a", "b", "a"])
    for fam in ("a", "b"):
        m = rep.per_family[fam]
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
        assert (m.fp_rate, m.fn_rate) == (0.0, 0.0)
    assert rep.accuracy == 1.0
    assert rep.macro_f1 == 1.0


def test_metrics_hand_counted_oracle():
    labels = ["A", "A", "B", "B"]
    preds = ["A", "B", "B", "B"]
    rep = compute_metrics(preds, labels)
    a, b = rep.per_family["A"], rep.per_family["B"]
    assert a.precision == pytest.approx(1.0)
    assert a.recall == pytest.approx(0.5)
    assert a.f1 == pytest.approx(2 / 3)
    assert b.precision == pytest.approx(2 / 3)
    assert b.recall == pytest.approx(1.0)
    assert b.f1 == pytest.approx(0.8)
    assert a.fn_rate == pytest.approx(0.5)
    assert b.fp_rate == pytest.approx(0.5)
    assert rep.confusion.tolist() == [[1, 1], [0, 2]]


def test_metrics_validation():
    with pytest.raises(LengthMismatch):
        compute_metrics(["a"], ["a", "b"])
    with pytest.raises(LengthMismatch):
        compute_metrics([], [])


def test_metrics_prediction_only_family_has_zero_recall():
    rep = compute_metrics(["c", "a"], ["a", "a"])
    assert "c" in rep.families
    assert rep.per_family["c"].recall == 0.0
    # macro averages only over families present in labels
    assert rep.macro_recall == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=40), st.integers(0, 10 ** 6))
def test_micro_identities_and_row_sums(labels, seed):
    rng = np.random.default_rng(seed)
    preds = [str(rng.choice(list("abc"))) for _ in labels]
    rep = compute_metrics(preds, labels)
    n = len(labels)
    assert rep.confusion.sum() == n
    # micro precision == micro recall == accuracy for single-label multiclass
    tp_total = np.trace(rep.confusion)
    assert tp_total / n == pytest.approx(rep.accuracy)
    counts = Counter(labels)
    for fam, c in counts.items():
        i = rep.families.index(fam)
        assert rep.confusion[i].sum() == c
        assert rep.per_family[fam].support == c


# -- information gain -------------------------------------------------------------

def test_ig_perfectly_separating_slot():
    x = np.array([[0.0], [0.0], [1.0], [1.0]])
    scores = feature_importance(x, ["a", "a", "b", "b"], names=("only",))
    assert scores == [("only", 100.0)]
    raw = brute_force_information_gain([0.0, 0.0, 1.0, 1.0], ["a", "a", "b", "b"])
    assert raw == pytest.approx(1.0)  # IG equals H(Y) = 1 bit


def test_ig_constant_slot_zero():
    x = np.array([[0.5, 0.0], [0.5, 1.0], [0.5, 0.0], [0.5, 1.0]])
    scores = dict(feature_importance(x, ["a", "b", "a", "b"], names=("const", "good")))
    assert scores["const"] == 0.0
    assert scores["good"] == 100.0


def test_ig_requires_two_classes():
    with pytest.raises(SingleClass):
        feature_importance(np.zeros((3, 2)), ["a", "a", "a"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4), st.integers(4, 32))
def test_ig_matches_bruteforce_oracle(seed, n_classes, n_samples):
    rng = np.random.default_rng(seed)
    x = rng.random((n_samples, 5))
    labels = [str(rng.integers(0, n_classes)) for _ in range(n_samples)]
    if len(set(labels)) < 2:
        labels[0] = "x"
    scores = feature_importance(x, labels, names=tuple(f"s{i}" for i in range(5)))
    raw = np.array([brute_force_information_gain(list(x[:, j]), labels) for j in range(5)])
    total = raw.sum()
    expected = {f"s{j}": (raw[j] / total * 100.0 if total else 0.0) for j in range(5)}
    for name, score in scores:
        assert score == pytest.approx(expected[name], abs=1e-9)
    values = [s for _, s in scores]
    assert values == sorted(values, reverse=True)
    if total:
        assert sum(values) == pytest.approx(100.0, abs=0.1)


def test_ig_permutation_invariant():
    rng = np.random.default_rng(2)
    x = rng.random((20, 3))
    labels = [str(rng.integers(0, 2)) for _ in range(20)]
    labels[0] = "1"
    labels[1] = "0"
    base = feature_importance(x, labels, names=("a", "b", "c"))
    perm = rng.permutation(20)
    shuffled = feature_importance(x[perm], [labels[i] for i in perm], names=("a", "b", "c"))
    assert base == shuffled


# -- stratified split ---------------------------------------------------------------

def test_stratified_split_proportions(small_corpus):
    _, manifest = small_corpus
    train, test = stratified_split(manifest.entries, 0.25, seed=3)
    assert sorted(train + test) == list(range(len(manifest.entries)))
    fam = lambda idx: Counter(manifest.entries[i].family for i in idx)
    assert all(v == 1 for v in fam(test).values())   # 4 per family, 25% -> 1
    assert all(v == 3 for v in fam(train).values())
    again = stratified_split(manifest.entries, 0.25, seed=3)
    assert (train, test) == again


# -- run_evaluation --------------------------------------------------------------------

def test_run_evaluation_emits_artifacts(tmp_path, small_corpus, small_matrix, run_config):
    out, manifest = small_corpus
    x, labels = small_matrix
    models = fit_family_models(x, labels)
    report_dir = tmp_path / "report"
    report = run_evaluation(out / "manifest.jsonl", models, run_config, report_dir)
    assert report.accuracy == 1.0  # training set of a well-separated corpus
    for name in ("metrics.csv", "fp_fn.csv", "importance.csv", "runtime.csv", "speed_accuracy.csv", "report.md"):
        assert (report_dir / name).exists(), name
    metrics = (report_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "family,precision_pct,recall_pct,f1_pct"
    assert any(line.startswith("locker_aes,100.0,100.0,100.0") for line in metrics)
    runtime = (report_dir / "runtime.csv").read_text().splitlines()[1:]
    counts = [int(r.split(",")[1]) for r in runtime]
    times = [int(r.split(",")[2]) for r in runtime]
    assert counts == sorted(counts) and len(set(counts)) == len(counts)
    assert times == sorted(times)
    importance = (report_dir / "importance.csv").read_text().splitlines()[1:]
    assert len(importance) == 34
    total = sum(float(r.split(",")[1]) for r in importance)
    assert total == pytest.approx(100.0, abs=0.5)  # one-decimal rounding in the csv
    md = (report_dir / "report.md").read_text()
    assert "Per-family classification metrics" in md
    assert str(manifest.master_seed) in md


def test_run_evaluation_empty_manifest_no_partial_artifacts(tmp_path, small_matrix, run_config):
    x, labels = small_matrix
    models = fit_family_models(x, labels)
    manifest_path = tmp_path / "manifest.jsonl"
    manifest_path.write_text('{"master_seed": 1, "tool_version": "x"}\n')
    report_dir = tmp_path / "report"
    with pytest.raises(CorpusError):
        run_evaluation(manifest_path, models, run_config, report_dir)
    assert not report_dir.exists()


def test_run_evaluation_deterministic_reports(tmp_path, small_corpus, small_matrix, run_config):
    out, _ = small_corpus
    x, labels = small_matrix
    models = fit_family_models(x, labels)
    run_evaluation(out / "manifest.jsonl", models, run_config, tmp_path / "r1")
    run_evaluation(out / "manifest.jsonl", models, run_config, tmp_path / "r2", jobs=2)
    for name in ("metrics.csv", "fp_fn.csv", "importance.csv", "speed_accuracy.csv", "report.md"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
