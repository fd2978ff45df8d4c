"""Dense symmetric linear algebra: Jacobi eigensolver, graph Laplacian,
spectral clustering and factorization.

The eigensolver is a cyclic Jacobi rotation sweep (row-major pivot order),
chosen for its simplicity and unconditional convergence on symmetric input;
problem sizes here are at most a few hundred, so O(n^3) per sweep is cheap.
All routines are pure and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed

SYMMETRY_TOL = 1e-12
KMEANS_RESTARTS = 20
KMEANS_ITERATIONS = 100


class AsymmetricInput(ValueError):
    pass


class NegativeWeight(ValueError):
    pass


class NonzeroDiagonal(ValueError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, sweeps: int):
        super().__init__(f"Jacobi sweep limit reached after {sweeps} sweeps")
        self.sweeps = sweeps


class KTooLarge(ValueError):
    pass


class RTooLarge(ValueError):
    pass


class NotPSD(ValueError):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # orthonormal columns, matched by index


def check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise AsymmetricInput(f"expected a square matrix, got shape {m.shape}")
    bound = SYMMETRY_TOL * np.maximum(1.0, np.abs(m))
    if not np.all(np.abs(m - m.T) <= bound):
        raise AsymmetricInput("matrix is not symmetric within tolerance")
    return m


def build_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """L = D - A for a symmetric non-negative adjacency with zero diagonal."""
    a = check_symmetric(adjacency)
    if np.any(a < 0):
        raise NegativeWeight("adjacency weights must be non-negative")
    if np.any(np.diag(a) != 0):
        raise NonzeroDiagonal("adjacency diagonal must be zero")
    return np.diag(a.sum(axis=1)) - a


def _rotation_params(app: float, aqq: float, apq: float) -> tuple[float, float]:
    theta = (aqq - app) / (2.0 * apq)
    if abs(theta) > 1e150:  # theta^2 would overflow; tan tends to 1/(2 theta)
        t = 0.5 / theta
    else:
        t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
    c = 1.0 / math.sqrt(t * t + 1.0)
    return c, t * c


def _jacobi_kernel(a, v, target, max_sweeps):
    """Cyclic row-major Jacobi sweeps on (a, v) in place.

    Returns the sweep count on convergence (off-diagonal Frobenius norm at or
    below target), -1 on sweep exhaustion. Written with scalar loops so numba
    can compile it; the numpy fallback below is the same pivot order.
    """
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if math.sqrt(off) <= target:
            return sweep
        if sweep == max_sweeps:
            return -1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for i in range(n):
                    aip = a[i, p]
                    aiq = a[i, q]
                    a[i, p] = c * aip - s * aiq
                    a[i, q] = s * aip + c * aiq
                for i in range(n):
                    api = a[p, i]
                    aqi = a[q, i]
                    a[p, i] = c * api - s * aqi
                    a[q, i] = s * api + c * aqi
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = c * vip - s * viq
                    v[i, q] = s * vip + c * viq
    return -1


def _jacobi_numpy(a, v, target, max_sweeps):
    """Slice-based variant of _jacobi_kernel, used when numba is unavailable."""
    n = a.shape[0]

    def offdiag() -> float:
        off = a - np.diag(np.diag(a))
        return math.sqrt(float((off * off).sum()))

    for sweep in range(max_sweeps + 1):
        if offdiag() <= target:
            return sweep
        if sweep == max_sweeps:
            return -1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                c, s = _rotation_params(a[p, p], a[q, q], apq)
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return -1


try:  # jit the scalar kernel when numba is present; identical arithmetic order
    from numba import njit

    _jacobi = njit(cache=True)(_jacobi_kernel)
except ImportError:  # pragma: no cover
    _jacobi = _jacobi_numpy


def eig_symmetric(m: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi diagonalization; converged when the off-diagonal norm
    drops below tol * ||m||_F."""
    a = check_symmetric(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n < 2:
        return EigenDecomposition(np.diag(a).copy(), v)

    frob = math.sqrt(float((a * a).sum()))
    if _jacobi(a, v, tol * frob, max_sweeps) < 0:
        raise NoConvergence(max_sweeps)

    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return EigenDecomposition(values[order], v[:, order])


def spectral_factorize(gram: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-r eigenpairs of a PSD matrix, eigenvalues descending."""
    g = check_symmetric(gram)
    n = g.shape[0]
    if r < 1 or r > n:
        raise RTooLarge(f"rank {r} out of range for dimension {n}")
    dec = eig_symmetric(g)
    frob = math.sqrt(float((g * g).sum()))
    if dec.eigenvalues[0] < -1e-8 * max(frob, 1.0):
        raise NotPSD(f"minimum eigenvalue {dec.eigenvalues[0]:.3e}")
    idx = np.arange(n - 1, n - 1 - r, -1)
    return dec.eigenvalues[idx].copy(), dec.eigenvectors[:, idx].copy()


def dominant_eigenvalue(m: np.ndarray) -> float:
    """Signed eigenvalue of largest magnitude (larger value wins a magnitude tie)."""
    dec = eig_symmetric(m)
    values = dec.eigenvalues
    best = values[0]
    for lam in values[1:]:
        if abs(lam) > abs(best) or (abs(lam) == abs(best) and lam > best):
            best = lam
    return float(best)


def _kmeans_once(points: np.ndarray, k: int, rng: SplitMix64) -> tuple[np.ndarray, float]:
    n = points.shape[0]
    centroids = points[rng.sample_indices(n, k)].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_ITERATIONS):
        # squared-Euclidean assignment; np.argmin takes the lowest centroid on ties
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)

        assigned = d2[np.arange(n), new_labels]
        for c in range(k):
            if not np.any(new_labels == c):
                # revive an empty cluster from the globally worst-fit point
                far = int(np.argmax(assigned))
                centroids[c] = points[far]
                new_labels[far] = c
                assigned[far] = 0.0
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if members.size:
                centroids[c] = members.mean(axis=0)
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), labels].sum())
    return labels, inertia


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def spectral_cluster(laplacian: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Embed nodes in the k smallest-eigenvalue eigenvectors and k-means them.

    20 seeded restarts, 100 iterations each; the lowest-inertia restart wins
    (first such restart on ties). Labels are renumbered in first-occurrence
    order, so the node 0 cluster is always 0.
    """
    lap = check_symmetric(laplacian)
    n = lap.shape[0]
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} out of range for {n} nodes")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    dec = eig_symmetric(lap)
    points = dec.eigenvectors[:, :k].copy()

    best_labels = None
    best_inertia = math.inf
    for restart in range(KMEANS_RESTARTS):
        rng = SplitMix64(derive_seed(seed, restart))
        labels, inertia = _kmeans_once(points, k, rng)
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    return _canonical_labels(best_labels)
