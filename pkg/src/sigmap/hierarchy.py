"""Three-level feature hierarchy assembled into a fixed 34-dim descriptor.

Level 1 (atomic): RBF responses of instruction-window class histograms
against fixed behaviour prototypes. Level 2 (function): mean/max/variance
pooling of per-instruction prototype responses over call-target function
spans, then a kernel Gram over function vectors whose top eigenvalues
summarize routine diversity. Level 3 (workflow): a cluster x channel x
phase tensor whose CP weights capture how crypto activity distributes over
program phases. The descriptor concatenates all levels with the channel
means, a multiscale differential score and data-entropy statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .extraction import (
    CHANNEL_COUNT,
    CLASS_COUNT,
    DEFAULT_WINDOW,
    SignatureProfile,
    opcode_classes,
    segment_functions,
    text_arrays,
    window_class_histograms,
)
from .rng import SplitMix64, derive_seed
from .spectral import build_laplacian, spectral_cluster, spectral_factorize
from .sxe import BinaryImage, Instruction

LAYOUT_VERSION = 1

TENSOR_CLUSTERS = 4
TENSOR_PHASES = 4

_CLUSTER_STREAM = 10
_CP_STREAM = 11


class EmptySeries(ValueError):
    pass


class SeriesTooShort(ValueError):
    pass


class SingularUpdate(RuntimeError):
    pass


@dataclass(frozen=True)
class Prototype:
    """Isotropic Gaussian over 6-dim opcode-class histograms."""
    prototype_id: str
    mu: tuple[float, ...]
    sigma: float = 0.15

    def __post_init__(self):
        if len(self.mu) != CLASS_COUNT:
            raise ValueError(f"prototype mean must have {CLASS_COUNT} entries")
        if self.sigma <= 0:
            raise ValueError("prototype sigma must be positive")
        if any(v < 0 for v in self.mu) or sum(self.mu) > 1 + 1e-9:
            raise ValueError("prototype mean must be a sub-distribution")


def default_prototypes() -> tuple[Prototype, ...]:
    """Fixed (not fitted) prototypes for the five behaviour archetypes.

    Order matters: it is the descriptor slot order. Class histogram order is
    (ARX, TABLE, MODULAR, MOVE, CONTROL, OTHER).
    """
    return (
        Prototype("ARX", (0.75, 0.0, 0.0, 0.125, 0.0, 0.125)),
        Prototype("TABLE", (0.25, 0.375, 0.0, 0.25, 0.0, 0.125)),
        Prototype("MODULAR", (0.125, 0.0, 0.5, 0.25, 0.0, 0.125)),
        Prototype("MOVE", (0.0, 0.0, 0.0, 0.75, 0.125, 0.125)),
        Prototype("CONTROL", (0.0, 0.0, 0.0, 0.125, 0.75, 0.125)),
    )


@dataclass(frozen=True)
class DescriptorConfig:
    prototypes: tuple[Prototype, ...] = field(default_factory=default_prototypes)
    window: int = DEFAULT_WINDOW
    n_max: int = 4
    cp_rank: int = 3
    cp_max_sweeps: int = 200
    cp_tol: float = 1e-8
    seed: int = 0x5EED


@dataclass
class CPFactors:
    weights: np.ndarray            # descending, non-negative
    factors: tuple[np.ndarray, np.ndarray, np.ndarray]  # unit-norm columns
    error: float                   # final relative reconstruction error
    sweep_errors: list[float]      # error after each completed sweep


@dataclass(frozen=True)
class HierarchicalDescriptor:
    values: np.ndarray
    layout_version: int = LAYOUT_VERSION


def _slot_names() -> tuple[str, ...]:
    protos = [p.prototype_id for p in default_prototypes()]
    names = [f"channel.{c}" for c in
             ("constant_match", "arx_density", "table_density", "modular_density", "data_entropy")]
    names += [f"atomic.{p}" for p in protos]
    names += [f"spectrum.eig{i}" for i in (1, 2, 3)]
    for pool in ("mean", "max", "var"):
        names += [f"func.{pool}.{p}" for p in protos]
    names += [f"cp.w{i}" for i in (1, 2, 3)]
    names += ["diff_score", "entropy.mean", "entropy.max"]
    return tuple(names)


DESCRIPTOR_SLOTS = _slot_names()
DESCRIPTOR_LENGTH = len(DESCRIPTOR_SLOTS)


def _prototype_arrays(prototypes) -> tuple[np.ndarray, np.ndarray]:
    mus = np.array([p.mu for p in prototypes], dtype=np.float64)
    sigmas = np.array([p.sigma for p in prototypes], dtype=np.float64)
    return mus, sigmas


def _responses(histograms: np.ndarray, prototypes) -> np.ndarray:
    """RBF response of each histogram row against each prototype."""
    mus, sigmas = _prototype_arrays(prototypes)
    d2 = ((histograms[:, None, :] - mus[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigmas * sigmas)[None, :])


def atomic_signatures(
    text: tuple[Instruction, ...],
    prototypes=None,
    window: int = DEFAULT_WINDOW,
) -> np.ndarray:
    """Mean RBF response over non-overlapping instruction windows.

    The mean normalization makes the score invariant to repeating the stream
    (for lengths that are window multiples). Streams shorter than one window
    give a zero vector.
    """
    prototypes = prototypes or default_prototypes()
    opcodes, _ = text_arrays(text)
    classes = opcode_classes(opcodes)
    n_windows = classes.size // window
    if n_windows == 0:
        return np.zeros(len(prototypes))
    trimmed = classes[:n_windows * window].reshape(n_windows, window)
    hists = np.stack([(trimmed == c).mean(axis=1) for c in range(CLASS_COUNT)], axis=1)
    return _responses(hists, prototypes).mean(axis=0)


def prototype_response_series(
    text: tuple[Instruction, ...],
    prototypes=None,
    window: int = DEFAULT_WINDOW,
) -> np.ndarray:
    """T x P per-instruction responses using the sliding channel window."""
    prototypes = prototypes or default_prototypes()
    opcodes, _ = text_arrays(text)
    classes = opcode_classes(opcodes)
    if classes.size == 0:
        return np.zeros((0, len(prototypes)))
    hists = window_class_histograms(classes, window)
    return _responses(hists, prototypes)


def pool_level(series: np.ndarray) -> np.ndarray:
    """Concatenated mean / max / population-variance per input dimension."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] == 0:
        raise EmptySeries("cannot pool an empty series")
    return np.concatenate([arr.mean(axis=0), arr.max(axis=0), arr.var(axis=0)])


def multiscale_diff_score(series, n_max: int = 4) -> float:
    """Alternating factorial-damped sum of mean forward differences.

    Sum over k of (-1)^(k+1)/k! * mean(diff^k series); exhausted difference
    sequences contribute nothing. Constant series score 0.
    """
    f = np.asarray(series, dtype=np.float64)
    if f.size < 2:
        raise SeriesTooShort("need at least two points")
    total = 0.0
    factorial = 1.0
    d = f
    for k in range(1, n_max + 1):
        d = np.diff(d)
        if d.size == 0:
            break
        factorial *= k
        sign = 1.0 if k % 2 == 1 else -1.0
        total += sign / factorial * float(d.mean())
    return total


def build_workflow_tensor(
    functions: list[tuple[int, int]],
    cluster_labels: np.ndarray,
    channels: np.ndarray,
    clusters: int = TENSOR_CLUSTERS,
    phases: int = TENSOR_PHASES,
) -> np.ndarray:
    """clusters x channels x phases tensor of mean channel activity.

    Cell (i, j, k) averages channel j over instructions that belong to a
    cluster-i function and fall in the k-th quarter of the instruction
    stream. Unpopulated cells stay zero.
    """
    t_count, n_channels = channels.shape if channels.size else (0, CHANNEL_COUNT)
    tensor = np.zeros((clusters, n_channels, phases))
    if t_count == 0 or not functions:
        return tensor
    if len(cluster_labels) != len(functions):
        raise ValueError("one cluster label per function required")
    if np.any(np.asarray(cluster_labels) >= clusters):
        raise ValueError(f"cluster labels must be < {clusters}")

    instr_cluster = np.zeros(t_count, dtype=np.int64)
    for (start, end), label in zip(functions, cluster_labels):
        instr_cluster[start:end] = label
    phase = np.minimum(np.arange(t_count) * phases // t_count, phases - 1)

    counts = np.zeros((clusters, phases))
    for i in range(clusters):
        for k in range(phases):
            mask = (instr_cluster == i) & (phase == k)
            cnt = int(mask.sum())
            if cnt:
                tensor[i, :, k] = channels[mask].mean(axis=0)
                counts[i, k] = cnt
    return tensor


def _khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; row (i,j) flattens as i*b_rows + j."""
    return np.einsum("ip,jp->ijp", a, b).reshape(a.shape[0] * b.shape[0], -1)


def _cp_reconstruct(weights, a, b, c) -> np.ndarray:
    return np.einsum("p,ip,jp,kp->ijk", weights, a, b, c)


def _normalize_columns(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=0)
    out = m.copy()
    for p, nrm in enumerate(norms):
        if nrm > 1e-12:
            out[:, p] /= nrm
        else:
            out[:, p] = 0.0
            out[0, p] = 1.0  # keep the unit-norm invariant for dead components
            norms[p] = 0.0
    return out, norms


def _cp_als_kernel(t, a, b, c, weights, errors, max_sweeps, tol, ridge):
    """ALS sweeps in place over (a, b, c); numba-compilable scalar core.

    Per sweep: exact normal-equation update of each mode (Gaussian elimination
    with partial pivoting; on a vanishing pivot the gram is ridge-regularized
    once), then column normalization into ``weights`` and the relative
    reconstruction error appended to ``errors``. Returns (sweeps_done, status)
    with status 1 when a system stayed singular after regularization.
    """
    dim_i, dim_j, dim_k = t.shape
    rank = a.shape[1]
    norm_t = 0.0
    for i in range(dim_i):
        for j in range(dim_j):
            for k in range(dim_k):
                norm_t += t[i, j, k] * t[i, j, k]
    norm_t = np.sqrt(norm_t)

    gram = np.empty((rank, rank))
    prev = -1.0
    sweeps = 0
    for sweep in range(max_sweeps):
        for mode in range(3):
            if mode == 0:
                u, w_mat, dim = b, c, dim_i
            elif mode == 1:
                u, w_mat, dim = a, c, dim_j
            else:
                u, w_mat, dim = a, b, dim_k
            for p in range(rank):
                for q in range(rank):
                    gu = 0.0
                    for r in range(u.shape[0]):
                        gu += u[r, p] * u[r, q]
                    gw = 0.0
                    for r in range(w_mat.shape[0]):
                        gw += w_mat[r, p] * w_mat[r, q]
                    gram[p, q] = gu * gw
            rhs = np.zeros((rank, dim))
            for i in range(dim_i):
                for j in range(dim_j):
                    for k in range(dim_k):
                        v = t[i, j, k]
                        if v == 0.0:
                            continue
                        for p in range(rank):
                            if mode == 0:
                                rhs[p, i] += v * b[j, p] * c[k, p]
                            elif mode == 1:
                                rhs[p, j] += v * a[i, p] * c[k, p]
                            else:
                                rhs[p, k] += v * a[i, p] * b[j, p]
            solution = np.empty((rank, dim))
            if not _gauss_solve(gram.copy(), rhs, solution):
                for p in range(rank):
                    gram[p, p] += ridge
                if not _gauss_solve(gram, rhs, solution):
                    return sweeps, 1
            if mode == 0:
                for i in range(dim_i):
                    for p in range(rank):
                        a[i, p] = solution[p, i]
            elif mode == 1:
                for j in range(dim_j):
                    for p in range(rank):
                        b[j, p] = solution[p, j]
            else:
                for k in range(dim_k):
                    for p in range(rank):
                        c[k, p] = solution[p, k]

        for p in range(rank):
            weights[p] = 1.0
        for mode in range(3):
            if mode == 0:
                f = a
            elif mode == 1:
                f = b
            else:
                f = c
            for p in range(rank):
                nrm = 0.0
                for r in range(f.shape[0]):
                    nrm += f[r, p] * f[r, p]
                nrm = np.sqrt(nrm)
                if nrm > 1e-12:
                    for r in range(f.shape[0]):
                        f[r, p] /= nrm
                    weights[p] *= nrm
                else:
                    for r in range(f.shape[0]):
                        f[r, p] = 0.0
                    f[0, p] = 1.0
                    weights[p] = 0.0

        sse = 0.0
        for i in range(dim_i):
            for j in range(dim_j):
                for k in range(dim_k):
                    rec = 0.0
                    for p in range(rank):
                        rec += weights[p] * a[i, p] * b[j, p] * c[k, p]
                    d = t[i, j, k] - rec
                    sse += d * d
        err = np.sqrt(sse) / norm_t
        errors[sweep] = err
        sweeps = sweep + 1
        if prev >= 0.0 and prev - err < tol * max(prev, 1e-12):
            break
        prev = err
    return sweeps, 0


def _gauss_solve(g, rhs, out):
    """Solve g @ out = rhs by Gaussian elimination with partial pivoting.
    Returns False when a pivot vanishes (singular system)."""
    rank = g.shape[0]
    cols = rhs.shape[1]
    work = np.empty((rank, cols))
    for p in range(rank):
        for q in range(cols):
            work[p, q] = rhs[p, q]
    for col in range(rank):
        piv = col
        for r in range(col + 1, rank):
            if abs(g[r, col]) > abs(g[piv, col]):
                piv = r
        if abs(g[piv, col]) < 1e-300:
            return False
        if piv != col:
            for q in range(rank):
                g[col, q], g[piv, q] = g[piv, q], g[col, q]
            for q in range(cols):
                work[col, q], work[piv, q] = work[piv, q], work[col, q]
        for r in range(col + 1, rank):
            factor = g[r, col] / g[col, col]
            for q in range(col, rank):
                g[r, q] -= factor * g[col, q]
            for q in range(cols):
                work[r, q] -= factor * work[col, q]
    for col in range(rank - 1, -1, -1):
        for q in range(cols):
            acc = work[col, q]
            for r in range(col + 1, rank):
                acc -= g[col, r] * out[r, q]
            out[col, q] = acc / g[col, col]
    return True


try:  # compile the ALS core when numba is present
    from numba import njit as _njit

    _gauss_solve = _njit(cache=True)(_gauss_solve)
    _cp_als_fast = _njit(cache=True)(_cp_als_kernel)
except ImportError:  # pragma: no cover
    _cp_als_fast = None


def cp_decompose(
    tensor: np.ndarray,
    rank: int = 3,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    seed: int = 0,
) -> CPFactors:
    """Rank-``rank`` CP decomposition by alternating least squares.

    Each mode update solves the exact normal equations (ridge-regularized on
    singularity), so the reconstruction error never increases between sweeps.
    Stops when the relative error improvement drops below ``tol``.
    """
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError("expected a 3-way tensor")
    if rank < 1:
        raise ValueError("rank must be positive")
    dims = t.shape
    norm_t = float(np.linalg.norm(t))
    if norm_t == 0.0:
        factors = []
        for n in dims:
            f = np.zeros((n, rank))
            f[0, :] = 1.0
            factors.append(f)
        return CPFactors(np.zeros(rank), tuple(factors), 0.0, [0.0])

    rng = SplitMix64(seed)
    factors = [
        np.array([[2.0 * rng.uniform() - 1.0 for _ in range(rank)] for _ in range(n)])
        for n in dims
    ]

    if _cp_als_fast is not None:
        weights = np.ones(rank)
        errors = np.zeros(max_sweeps)
        sweeps, status = _cp_als_fast(
            t, factors[0], factors[1], factors[2], weights, errors,
            max_sweeps, tol, 1e-9,
        )
        if status:
            raise SingularUpdate("normal equations singular after regularization")
        sweep_errors = [float(e) for e in errors[:sweeps]]
    else:
        unfolds = [
            t.reshape(dims[0], -1),
            t.transpose(1, 0, 2).reshape(dims[1], -1),
            t.transpose(2, 0, 1).reshape(dims[2], -1),
        ]
        others = [(1, 2), (0, 2), (0, 1)]

        def solve_mode(mode):
            u, v = others[mode]
            kr = _khatri_rao(factors[u], factors[v])
            gram = (factors[u].T @ factors[u]) * (factors[v].T @ factors[v])
            rhs = (unfolds[mode] @ kr).T
            try:
                return np.linalg.solve(gram, rhs).T
            except np.linalg.LinAlgError:
                try:
                    return np.linalg.solve(gram + 1e-9 * np.eye(rank), rhs).T
                except np.linalg.LinAlgError as exc:
                    raise SingularUpdate("normal equations singular after regularization") from exc

        weights = np.ones(rank)
        sweep_errors = []
        prev = None
        for _ in range(max_sweeps):
            for mode in range(3):
                factors[mode] = solve_mode(mode)
            weights = np.ones(rank)
            for mode in range(3):
                factors[mode], norms = _normalize_columns(factors[mode])
                weights = weights * norms
            err = float(np.linalg.norm(t - _cp_reconstruct(weights, *factors))) / norm_t
            sweep_errors.append(err)
            if prev is not None and prev - err < tol * max(prev, 1e-12):
                break
            prev = err

    order = np.argsort(-weights, kind="stable")
    weights = weights[order]
    factors = [f[:, order] for f in factors]
    return CPFactors(weights, tuple(factors), sweep_errors[-1], sweep_errors)


def _function_gram(func_vectors: np.ndarray) -> np.ndarray:
    """RBF Gram over function vectors; kernel width is the median pairwise
    distance (1.0 when degenerate)."""
    n = func_vectors.shape[0]
    diff = func_vectors[:, None, :] - func_vectors[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    if n >= 2:
        pair_d = np.sqrt(d2[np.triu_indices(n, k=1)])
        sigma = float(np.median(pair_d))
        if sigma <= 0.0:
            sigma = 1.0
    else:
        sigma = 1.0
    return np.exp(-d2 / (2.0 * sigma * sigma))


def build_descriptor(
    image: BinaryImage,
    profile: SignatureProfile,
    config: DescriptorConfig | None = None,
) -> HierarchicalDescriptor:
    """Run the full level chain and concatenate the fixed 34-slot layout:

    channel means (5) | atomic responses (5) | function-Gram top-3 spectrum,
    trace-normalized (3) | mean function vector (15) | CP weights,
    sum-normalized (3) | diff score (1) | data entropy mean & max / 8 (2).
    """
    config = config or DescriptorConfig()
    protos = config.prototypes

    atomic = atomic_signatures(image.text, protos, config.window)
    responses = prototype_response_series(image.text, protos, config.window)
    functions = segment_functions(image.text)

    spectrum = np.zeros(3)
    mean_func = np.zeros(3 * len(protos))
    labels = np.zeros(len(functions), dtype=np.int64)
    if functions:
        func_vectors = np.stack([pool_level(responses[s:e]) for s, e in functions])
        mean_func = func_vectors.mean(axis=0)
        gram = _function_gram(func_vectors)
        n_funcs = gram.shape[0]
        top, _ = spectral_factorize(gram, min(3, n_funcs))
        trace = float(np.trace(gram))
        if trace > 0:
            spectrum[:top.size] = top / trace
        k = min(TENSOR_CLUSTERS, n_funcs)
        adjacency = gram - np.diag(np.diag(gram))
        labels = spectral_cluster(
            build_laplacian(adjacency), k, derive_seed(config.seed, _CLUSTER_STREAM)
        )

    tensor = build_workflow_tensor(functions, labels, profile.channels)
    cp = cp_decompose(
        tensor,
        rank=config.cp_rank,
        max_sweeps=config.cp_max_sweeps,
        tol=config.cp_tol,
        seed=derive_seed(config.seed, _CP_STREAM),
    )
    cp_slots = np.zeros(3)
    total = float(cp.weights.sum())
    if total > 0:
        take = min(3, cp.weights.size)
        cp_slots[:take] = cp.weights[:take] / total

    series = profile.channels.mean(axis=1) if profile.channels.shape[0] else np.array([])
    diff_score = multiscale_diff_score(series, config.n_max) if series.size >= 2 else 0.0

    ep = profile.entropy_profile
    entropy_stats = (
        np.array([float(ep.mean()) / 8.0, float(ep.max()) / 8.0]) if ep.size else np.zeros(2)
    )

    values = np.concatenate([
        profile.channel_means,
        atomic,
        spectrum,
        mean_func,
        cp_slots,
        [diff_score],
        entropy_stats,
    ])
    if values.size != DESCRIPTOR_LENGTH:
        raise ValueError(f"descriptor layout produced {values.size} slots")
    return HierarchicalDescriptor(values=values)


def dump_descriptors_csv(paths: list[str], descriptors: list[HierarchicalDescriptor], out_path) -> None:
    """One row per sample: manifest path plus the 34 named slots."""
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("path",) + DESCRIPTOR_SLOTS)
        for path, desc in zip(paths, descriptors):
            writer.writerow([path] + [f"{v:.9f}" for v in desc.values])
