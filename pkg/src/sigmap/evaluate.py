"""Evaluation harness: metrics, feature ranking and report artifacts.

Emits the full artifact set for a manifest: per-family precision/recall/F1,
false positive/negative rates, information-gain feature importances, runtime
scaling checkpoints and accuracy grouped by encryption rounds, plus a
markdown summary. Every artifact except runtime.csv is a pure function of
the inputs, so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import classify
from .config import RunConfig
from .corpus import CorpusError, CorpusManifest, ManifestEntry, load_manifest
from .hierarchy import DESCRIPTOR_SLOTS, HierarchicalDescriptor
from .pipeline import build_descriptors
from .rng import SplitMix64, derive_seed

DEFAULT_BINS = 8
_PREFIX_FRACTIONS = (0.25, 0.50, 0.75, 1.00)


class LengthMismatch(ValueError):
    pass


class SingleClass(ValueError):
    pass


@dataclass(frozen=True)
class FamilyMetrics:
    precision: float
    recall: float
    f1: float
    fp_rate: float
    fn_rate: float
    support: int


@dataclass
class EvaluationReport:
    families: list[str]
    confusion: np.ndarray
    per_family: dict[str, FamilyMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    importances: list[tuple[str, float]] = field(default_factory=list)
    runtime_records: list[tuple[str, int, int]] = field(default_factory=list)
    speed_accuracy: list[tuple[int, int, float]] = field(default_factory=list)


def compute_metrics(predictions: list[str], labels: list[str]) -> EvaluationReport:
    """One-vs-rest metrics per family; macro averages over families present
    in the true labels. Undefined ratios (empty denominators) count as 0."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise LengthMismatch("need at least one sample")

    families: list[str] = []
    for lab in list(labels) + list(predictions):
        if lab not in families:
            families.append(lab)
    index = {f: i for i, f in enumerate(families)}
    n = len(labels)

    confusion = np.zeros((len(families), len(families)), dtype=np.int64)
    for true, pred in zip(labels, predictions):
        confusion[index[true], index[pred]] += 1

    per_family: dict[str, FamilyMetrics] = {}
    label_set = set(labels)
    for f, i in index.items():
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = int(confusion[i, :].sum()) - tp
        tn = n - tp - fp - fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        fp_rate = fp / (fp + tn) if fp + tn else 0.0
        fn_rate = fn / (fn + tp) if fn + tp else 0.0
        per_family[f] = FamilyMetrics(precision, recall, f1, fp_rate, fn_rate, tp + fn)

    present = [f for f in families if f in label_set]
    macro_p = sum(per_family[f].precision for f in present) / len(present)
    macro_r = sum(per_family[f].recall for f in present) / len(present)
    macro_f1 = sum(per_family[f].f1 for f in present) / len(present)
    accuracy = sum(p == t for p, t in zip(predictions, labels)) / n
    return EvaluationReport(
        families=families,
        confusion=confusion,
        per_family=per_family,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f1,
        accuracy=accuracy,
    )


def _label_entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def information_gain(
    descriptors: np.ndarray,
    labels: list[str],
    bins: int = DEFAULT_BINS,
) -> np.ndarray:
    """Raw per-slot information gain in bits: H(Y) minus the label entropy
    conditioned on the equal-width-binned slot value. Constant slots gain 0."""
    x = np.asarray(descriptors, dtype=np.float64)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise SingleClass("information gain needs at least two classes")

    y = np.array([classes.index(lab) for lab in labels])
    n = x.shape[0]
    h_y = _label_entropy(np.bincount(y, minlength=len(classes)))

    gains = np.zeros(x.shape[1])
    for j in range(x.shape[1]):
        col = x[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            continue
        width = (hi - lo) / bins
        b = np.minimum(((col - lo) / width).astype(np.int64), bins - 1)
        cond = 0.0
        for bin_id in range(bins):
            mask = b == bin_id
            cnt = int(mask.sum())
            if cnt == 0:
                continue
            cond += (cnt / n) * _label_entropy(np.bincount(y[mask], minlength=len(classes)))
        gains[j] = max(h_y - cond, 0.0)
    return gains


def feature_importance(
    descriptors: np.ndarray,
    labels: list[str],
    bins: int = DEFAULT_BINS,
    names: tuple[str, ...] | None = None,
) -> list[tuple[str, float]]:
    """Information gain of each slot, scaled to sum to 100 and sorted descending."""
    x = np.asarray(descriptors, dtype=np.float64)
    if names is None:
        names = DESCRIPTOR_SLOTS if x.shape[1] == len(DESCRIPTOR_SLOTS) else tuple(
            f"slot{i}" for i in range(x.shape[1])
        )
    gains = information_gain(x, labels, bins)
    total = gains.sum()
    scores = gains / total * 100.0 if total > 0 else gains
    order = sorted(range(len(names)), key=lambda j: (-scores[j], j))
    return [(names[j], float(scores[j])) for j in order]


def stratified_split(
    entries: list[ManifestEntry],
    test_fraction: float,
    seed: int,
) -> tuple[list[int], list[int]]:
    """Seeded per-family shuffle, first (1 - fraction) of each family trains."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    by_family: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        by_family.setdefault(e.family, []).append(i)
    train: list[int] = []
    test: list[int] = []
    for g, (family, idx) in enumerate(sorted(by_family.items())):
        rng = SplitMix64(derive_seed(seed, g))
        idx = list(idx)
        rng.shuffle(idx)
        n_test = max(1, int(round(len(idx) * test_fraction))) if len(idx) > 1 else 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return sorted(train), sorted(test)


# ---------------------------------------------------------------------------
# artifact emission


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


def _write_csv(path: Path, header: tuple[str, ...], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


_SCHEMAS = (
    "metrics.csv: family,precision_pct,recall_pct,f1_pct",
    "fp_fn.csv: family,fp_rate_pct,fn_rate_pct",
    "importance.csv: feature,importance_pct",
    "runtime.csv: prefix,samples,cumulative_ms (wall clock; excluded from determinism checks)",
    "speed_accuracy.csv: rounds_per_block,samples,accuracy_pct",
)


def run_evaluation(
    manifest_path,
    models,
    config: RunConfig,
    report_dir,
    jobs: int = 1,
) -> EvaluationReport:
    """Classify every manifest sample and emit the full artifact set."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    if not manifest.entries:
        raise CorpusError(f"manifest {manifest_path} lists no samples")
    base = manifest_path.parent
    paths = [base / e.path for e in manifest.entries]
    labels = [e.family for e in manifest.entries]
    n = len(paths)

    checkpoints = sorted({max(1, math.ceil(n * f)) for f in _PREFIX_FRACTIONS})
    runtime_records: list[tuple[str, int, int]] = []
    t0 = time.perf_counter()

    def on_result(i: int) -> None:
        done = i + 1
        if done in set(checkpoints):
            pct = round(100.0 * done / n)
            runtime_records.append(
                (f"{pct}%", done, int(round((time.perf_counter() - t0) * 1000)))
            )

    descriptors = build_descriptors(paths, config, jobs=jobs, on_result=on_result)
    predictions = [classify(d, models)[0] for d in descriptors]

    report = compute_metrics(predictions, labels)
    report.runtime_records = runtime_records

    matrix = np.stack([d.values for d in descriptors])
    if len(set(labels)) >= 2:
        report.importances = feature_importance(matrix, labels)

    by_rounds: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_rounds.setdefault(e.rounds_per_block, []).append(i)
    report.speed_accuracy = [
        (
            rounds,
            len(idx),
            sum(predictions[i] == labels[i] for i in idx) / len(idx),
        )
        for rounds, idx in sorted(by_rounds.items())
    ]

    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ("family", "precision_pct", "recall_pct", "f1_pct"), [
        (f, _pct(m.precision), _pct(m.recall), _pct(m.f1))
        for f, m in ((f, report.per_family[f]) for f in report.families)
    ])
    _write_csv(out / "fp_fn.csv", ("family", "fp_rate_pct", "fn_rate_pct"), [
        (f, _pct(report.per_family[f].fp_rate), _pct(report.per_family[f].fn_rate))
        for f in report.families
    ])
    _write_csv(out / "importance.csv", ("feature", "importance_pct"), [
        (name, f"{score:.1f}") for name, score in report.importances
    ])
    _write_csv(out / "runtime.csv", ("prefix", "samples", "cumulative_ms"), [
        (label, count, ms) for label, count, ms in report.runtime_records
    ])
    _write_csv(out / "speed_accuracy.csv", ("rounds_per_block", "samples", "accuracy_pct"), [
        (rounds, count, _pct(acc)) for rounds, count, acc in report.speed_accuracy
    ])
    (out / "report.md").write_text(_render_report(manifest, report))
    return report


def _render_report(manifest: CorpusManifest, report: EvaluationReport) -> str:
    lines = ["# Evaluation report", ""]
    lines += [f"<!-- {schema} -->" for schema in _SCHEMAS]
    lines += [
        "",
        f"- master seed: {manifest.master_seed}",
        f"- samples evaluated: {int(report.confusion.sum())}",
        f"- overall accuracy: {_pct(report.accuracy)}%",
        f"- macro precision / recall / F1: "
        f"{_pct(report.macro_precision)}% / {_pct(report.macro_recall)}% / {_pct(report.macro_f1)}%",
        "",
        "## Per-family classification metrics",
        "",
        "| Family | Precision (%) | Recall (%) | F1 (%) |",
        "|---|---|---|---|",
    ]
    for f in report.families:
        m = report.per_family[f]
        lines.append(f"| {f} | {_pct(m.precision)} | {_pct(m.recall)} | {_pct(m.f1)} |")
    lines += [
        "",
        "## False positive and false negative rates",
        "",
        "| Family | FP rate (%) | FN rate (%) |",
        "|---|---|---|",
    ]
    for f in report.families:
        m = report.per_family[f]
        lines.append(f"| {f} | {_pct(m.fp_rate)} | {_pct(m.fn_rate)} |")
    if report.importances:
        lines += [
            "",
            "## Feature importance (information gain, % of total)",
            "",
            "| Feature | Importance (%) |",
            "|---|---|",
        ]
        for name, score in report.importances:
            lines.append(f"| {name} | {score:.1f} |")
    if report.speed_accuracy:
        lines += [
            "",
            "## Accuracy by encryption rounds per block",
            "",
            "| Rounds | Samples | Accuracy (%) |",
            "|---|---|---|",
        ]
        for rounds, count, acc in report.speed_accuracy:
            lines.append(f"| {rounds} | {count} | {_pct(acc)} |")
    lines += [
        "",
        "## Confusion matrix (rows: true, columns: predicted)",
        "",
        "| | " + " | ".join(report.families) + " |",
        "|---|" + "---|" * len(report.families),
    ]
    for i, f in enumerate(report.families):
        row = " | ".join(str(int(v)) for v in report.confusion[i])
        lines.append(f"| {f} | {row} |")
    lines += [
        "",
        "Wall-clock scaling lives in runtime.csv; it is intentionally left out",
        "of this summary so reports are byte-reproducible.",
        "",
    ]
    return "\n".join(lines)
