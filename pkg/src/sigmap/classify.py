"""Family models and classification.

A family model is its descriptor centroid plus the top eigenvectors of the
within-family covariance. A sample is scored per family by the squared norm
of its centroid offset after projecting out that dominant within-family
variation, so families keep matching their own spread (encryption speed,
sample size) without widening toward other classes. The rule-based baseline
classifies purely from whole-constant matches, the comparison point for
obfuscation resilience.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extraction import ConstantMatch
from .fingerprints import family_of_constant
from .hierarchy import LAYOUT_VERSION, HierarchicalDescriptor
from .spectral import spectral_factorize

BASELINE_THRESHOLD = 0.9
SUBSPACE_RANK = 2
COVARIANCE_EPSILON = 1e-6
_MIN_SAMPLES_FOR_BASIS = 3


class EmptyTrainingSet(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ModelMismatch(ValueError):
    pass


@dataclass
class FamilyModel:
    family: str
    centroid: np.ndarray
    basis: np.ndarray        # q x d orthonormal rows; may be empty (0 x d)
    sample_count: int


@dataclass
class FamilyModelSet:
    models: list[FamilyModel]  # in first-appearance training order
    layout_version: int = LAYOUT_VERSION
    config_fingerprint: str = ""
    config_text: str = ""

    @property
    def families(self) -> list[str]:
        return [m.family for m in self.models]

    @property
    def dimension(self) -> int:
        return self.models[0].centroid.size


def fit_family_models(
    descriptors: np.ndarray,
    labels: list[str],
    q: int = SUBSPACE_RANK,
    epsilon: float = COVARIANCE_EPSILON,
) -> FamilyModelSet:
    """Centroid plus top-q covariance eigenvectors per family.

    Families with fewer than three samples keep an empty basis (their
    covariance carries no usable direction). Deterministic; family order is
    first appearance in the label sequence.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyTrainingSet("need at least one descriptor")
    if len(labels) != x.shape[0]:
        raise DimensionMismatch(f"{len(labels)} labels for {x.shape[0]} descriptors")
    d = x.shape[1]

    order: list[str] = []
    for lab in labels:
        if lab not in order:
            order.append(lab)

    labels_arr = np.asarray(labels)
    models = []
    for family in order:
        rows = x[labels_arr == family]
        centroid = rows.mean(axis=0)
        if rows.shape[0] >= _MIN_SAMPLES_FOR_BASIS and q > 0:
            centered = rows - centroid
            cov = centered.T @ centered / rows.shape[0] + epsilon * np.eye(d)
            _, vecs = spectral_factorize(cov, min(q, d))
            basis = vecs.T
        else:
            basis = np.zeros((0, d))
        models.append(FamilyModel(family, centroid, basis, int(rows.shape[0])))
    return FamilyModelSet(models=models)


def score_families(x: np.ndarray, models: FamilyModelSet) -> dict[str, float]:
    """Negative squared residual norm per family (0 is the best possible)."""
    x = np.asarray(x, dtype=np.float64)
    if not models.models:
        raise EmptyTrainingSet("model set is empty")
    if x.size != models.dimension:
        raise ModelMismatch(f"descriptor has {x.size} slots, models expect {models.dimension}")
    scores = {}
    for m in models.models:
        r = x - m.centroid
        if m.basis.shape[0]:
            r = r - m.basis.T @ (m.basis @ r)
        scores[m.family] = -float(r @ r)
    return scores


def classify(
    descriptor: HierarchicalDescriptor,
    models: FamilyModelSet,
) -> tuple[str, dict[str, float]]:
    """Predicted family (argmax score, earliest-trained family on ties) plus
    all per-family scores."""
    if descriptor.layout_version != models.layout_version:
        raise ModelMismatch(
            f"descriptor layout v{descriptor.layout_version} vs models v{models.layout_version}"
        )
    scores = score_families(descriptor.values, models)
    best = models.families[0]
    for family in models.families[1:]:
        if scores[family] > scores[best]:
            best = family
    return best, scores


def baseline_classify(matches: list[ConstantMatch], threshold: float = BASELINE_THRESHOLD) -> str:
    """Whole-constant rule table: AES+RSA -> hybrid, AES -> locker,
    ChaCha -> wiper, RSA -> crypto, nothing -> benign."""
    hit = {"aes": False, "chacha": False, "rsa": False}
    for m in matches:
        if m.score >= threshold:
            hit[family_of_constant(m.constant_id)] = True
    if hit["aes"] and hit["rsa"]:
        return "hybrid_aes_rsa"
    if hit["aes"]:
        return "locker_aes"
    if hit["chacha"]:
        return "wiper_chacha"
    if hit["rsa"]:
        return "crypto_rsa"
    return "benign"


# ---------------------------------------------------------------------------
# model file io


def save_models(models: FamilyModelSet, path) -> None:
    payload = {
        "layout_version": models.layout_version,
        "config_fingerprint": models.config_fingerprint,
        "config_text": models.config_text,
        "families": [
            {
                "name": m.family,
                "sample_count": m.sample_count,
                "centroid": m.centroid.tolist(),
                "basis": m.basis.tolist(),
            }
            for m in models.models
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_models(path) -> FamilyModelSet:
    try:
        payload = json.loads(Path(path).read_text())
        models = [
            FamilyModel(
                family=entry["name"],
                centroid=np.array(entry["centroid"], dtype=np.float64),
                basis=np.array(entry["basis"], dtype=np.float64).reshape(
                    len(entry["basis"]), len(entry["centroid"])
                ),
                sample_count=entry["sample_count"],
            )
            for entry in payload["families"]
        ]
        return FamilyModelSet(
            models=models,
            layout_version=payload["layout_version"],
            config_fingerprint=payload.get("config_fingerprint", ""),
            config_text=payload.get("config_text", ""),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelMismatch(f"unreadable model file {path}: {exc}") from exc


def config_fingerprint(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()
