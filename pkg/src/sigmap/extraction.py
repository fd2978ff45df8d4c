"""Per-sample raw feature extraction from parsed SXE images.

Produces a SignatureProfile: a T x 5 channel matrix and its time average,
an opcode-class differential histogram, kernel-scored constant matches, a
sliding-window entropy profile of the data section, and the control flow
graph. All operations are pure; extraction of different samples can run on
any number of workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fingerprints import RSA_CONTEXT_WINDOW, ReferenceConstant
from .sxe import (
    BRANCH_OPCODES,
    DATA_OPCODES,
    TERMINAL_OPCODES,
    BinaryImage,
    Instruction,
    Opcode,
)

# Opcode behaviour classes used by the differential operator, the channel
# densities and the window histograms.
ARX, TABLE, MODULAR, MOVE, CONTROL, OTHER = range(6)
CLASS_COUNT = 6
CLASS_NAMES = ("ARX", "TABLE", "MODULAR", "MOVE", "CONTROL", "OTHER")

OP_CLASS = {
    Opcode.HALT: CONTROL,
    Opcode.MOV: MOVE,
    Opcode.ADD: ARX,
    Opcode.SUB: ARX,
    Opcode.XOR: ARX,
    Opcode.AND: OTHER,
    Opcode.OR: OTHER,
    Opcode.ROTL: ARX,
    Opcode.ROTR: ARX,
    Opcode.SHL: ARX,
    Opcode.SHR: ARX,
    Opcode.MUL: MODULAR,
    Opcode.MODMUL: MODULAR,
    Opcode.LOAD: MOVE,
    Opcode.STORE: MOVE,
    Opcode.TBL: TABLE,
    Opcode.JMP: CONTROL,
    Opcode.JZ: CONTROL,
    Opcode.CALL: CONTROL,
    Opcode.RET: CONTROL,
    Opcode.NOP: OTHER,
}

_CLASS_LUT = np.array([OP_CLASS[Opcode(code)] for code in range(len(Opcode))], dtype=np.int64)

CHANNEL_NAMES = ("constant_match", "arx_density", "table_density", "modular_density", "data_entropy")
CHANNEL_COUNT = 5

DEFAULT_WINDOW = 8
ENTROPY_WINDOW = 64
ENTROPY_STRIDE = 32
ENTROPY_MIN_TAIL = 16
SIGMA_SCALE = 0.35
MATCH_THRESHOLD = 0.9


class EmptyWindow(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NonpositiveSigma(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


@dataclass(frozen=True)
class ConstantMatch:
    constant_id: str
    data_offset: int
    score: float
    length: int  # span is [data_offset, data_offset + length)

    @property
    def end(self) -> int:
        return self.data_offset + self.length


@dataclass(frozen=True)
class ControlFlowGraph:
    node_count: int
    edges: frozenset[tuple[int, int]]


@dataclass
class SignatureProfile:
    channel_means: np.ndarray      # 5-vector, time average of the channel matrix
    diff_hist: np.ndarray          # 11 bins over class differentials -5..+5
    matches: list[ConstantMatch]
    entropy_profile: np.ndarray    # bits/byte per 64-byte window
    cfg: ControlFlowGraph
    channels: np.ndarray           # T x 5


def text_arrays(text: tuple[Instruction, ...]) -> tuple[np.ndarray, np.ndarray]:
    """(opcodes, operands) as int64 arrays; the array form feeds every vectorized op."""
    n = len(text)
    opcodes = np.fromiter((ins.opcode for ins in text), dtype=np.int64, count=n)
    operands = np.fromiter((ins.operand for ins in text), dtype=np.int64, count=n)
    return opcodes, operands


def shannon_entropy(window: bytes | np.ndarray) -> float:
    """Byte-value Shannon entropy in bits/byte, in [0, 8]."""
    buf = np.frombuffer(window, dtype=np.uint8) if isinstance(window, (bytes, bytearray)) else window
    if buf.size == 0:
        raise EmptyWindow("entropy of an empty window is undefined")
    counts = np.bincount(buf, minlength=256)
    p = counts[counts > 0] / buf.size
    return float(-(p * np.log2(p)).sum())


def entropy_profile(
    data: bytes,
    window: int = ENTROPY_WINDOW,
    stride: int = ENTROPY_STRIDE,
) -> np.ndarray:
    """Entropy of each full window at stride offsets, plus one uncovered tail
    window when at least ENTROPY_MIN_TAIL bytes remain past the last full one."""
    n = len(data)
    buf = np.frombuffer(data, dtype=np.uint8)
    values = []
    end = 0
    if n >= window:
        for off in range(0, n - window + 1, stride):
            values.append(shannon_entropy(buf[off:off + window]))
            end = off + window
    if n - end >= ENTROPY_MIN_TAIL:
        values.append(shannon_entropy(buf[end:]))
    return np.array(values, dtype=np.float64)


def kernel_similarity(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """Gaussian similarity exp(-||x-y||^2 / (2 sigma^2)), in (0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"shapes {x.shape} vs {y.shape}")
    if sigma <= 0:
        raise NonpositiveSigma(f"sigma must be positive, got {sigma}")
    d2 = float(np.sum((x - y) ** 2))
    return math.exp(-d2 / (2.0 * sigma * sigma))


def reference_sigma(length: int, sigma: float | None = None) -> float:
    """Kernel width for a reference of the given byte length.

    The default grows with sqrt(L) so per-byte tolerance stays constant and
    verbatim embeddings stay sharply separated from arbitrary windows.
    """
    return sigma if sigma is not None else SIGMA_SCALE * math.sqrt(length)


def _local_maxima(scores: np.ndarray) -> np.ndarray:
    """Indices strictly above the left neighbour and at least the right one,
    so a flat plateau reports only its first offset."""
    if scores.size == 1:
        return np.array([0])
    left = np.empty_like(scores)
    left[0] = -np.inf
    left[1:] = scores[:-1]
    right = np.empty_like(scores)
    right[-1] = -np.inf
    right[:-1] = scores[1:]
    return np.nonzero((scores > left) & (scores >= right))[0]


def scan_constants(
    image: BinaryImage,
    refs: list[ReferenceConstant],
    sigma: float | None = None,
    threshold: float = MATCH_THRESHOLD,
) -> list[ConstantMatch]:
    """Kernel-score every reference against every data window (stride 1).

    Local maxima at or above the threshold become matches. Context-gated
    references additionally need a MODMUL operand within RSA_CONTEXT_WINDOW
    bytes of the match offset. Returned sorted by (offset, constant_id).
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    data = np.frombuffer(image.data, dtype=np.uint8).astype(np.float64) / 255.0
    modmul_operands: np.ndarray | None = None
    matches: list[ConstantMatch] = []

    for ref in refs:
        length = len(ref)
        if length == 0 or length > data.size:
            continue
        ref_vec = np.frombuffer(ref.payload, dtype=np.uint8).astype(np.float64) / 255.0
        windows = np.lib.stride_tricks.sliding_window_view(data, length)
        d2 = np.sum((windows - ref_vec) ** 2, axis=1)
        s = reference_sigma(length, sigma)
        scores = np.exp(-d2 / (2.0 * s * s))
        for idx in _local_maxima(scores):
            score = float(scores[idx])
            if score < threshold:
                continue
            offset = int(idx)
            if ref.needs_modmul_context:
                if modmul_operands is None:
                    opcodes, operands = text_arrays(image.text)
                    modmul_operands = operands[opcodes == int(Opcode.MODMUL)]
                if not np.any(np.abs(modmul_operands - offset) <= RSA_CONTEXT_WINDOW):
                    continue
            matches.append(ConstantMatch(ref.constant_id, offset, score, length))

    matches.sort(key=lambda m: (m.data_offset, m.constant_id))
    return matches


def opcode_classes(opcodes: np.ndarray) -> np.ndarray:
    return _CLASS_LUT[opcodes]


def opcode_differential(text: tuple[Instruction, ...]) -> tuple[np.ndarray, np.ndarray]:
    """First difference of the opcode-class sequence plus its normalized
    11-bin histogram (values -5..+5). Under two instructions: empty diff and
    an all-zero histogram."""
    opcodes, _ = text_arrays(text)
    classes = opcode_classes(opcodes)
    hist = np.zeros(11, dtype=np.float64)
    if classes.size < 2:
        return np.array([], dtype=np.int64), hist
    diff = np.diff(classes)
    counts = np.bincount(diff + 5, minlength=11)
    return diff, counts / diff.size


def _window_bounds(t: np.ndarray, n: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    half = window // 2
    lo = np.maximum(t - half, 0)
    hi = np.minimum(t + half, n)
    return lo, hi


def _window_fraction(indicator: np.ndarray, window: int) -> np.ndarray:
    """Per-position fraction of set flags in the half-open window [t-W/2, t+W/2)."""
    n = indicator.size
    csum = np.concatenate(([0], np.cumsum(indicator)))
    t = np.arange(n)
    lo, hi = _window_bounds(t, n, window)
    return (csum[hi] - csum[lo]) / (hi - lo)


def window_class_histograms(classes: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """T x 6 matrix: per-instruction class histogram of its sliding window."""
    n = classes.size
    out = np.empty((n, CLASS_COUNT), dtype=np.float64)
    for c in range(CLASS_COUNT):
        out[:, c] = _window_fraction((classes == c).astype(np.int64), window)
    return out


def _sliding_max(values: np.ndarray, window: int) -> np.ndarray:
    """Max of values over [t-W/2, t+W/2) per position t (W is small)."""
    n = values.size
    half = window // 2
    out = np.full(n, -np.inf)
    for shift in range(-half, half):
        src_lo = max(0, shift)
        src_hi = min(n, n + shift)
        if src_lo >= src_hi:
            continue
        out[src_lo - shift:src_hi - shift] = np.maximum(
            out[src_lo - shift:src_hi - shift], values[src_lo:src_hi]
        )
    return out


def channel_response(
    image: BinaryImage,
    matches: list[ConstantMatch],
    window: int = DEFAULT_WINDOW,
) -> np.ndarray:
    """T x 5 channel matrix, entries in [0, 1].

    ch0: best match score among constants referenced (TBL/LOAD operand inside
         the match span) by any instruction in the window around t.
    ch1-ch3: ARX / TABLE / MODULAR fraction of the window.
    ch4: entropy/8 of the 64-byte data region centred on the instruction's
         referenced offset; 0 for instructions without a data reference.
    """
    opcodes, operands = text_arrays(image.text)
    n = opcodes.size
    out = np.zeros((n, CHANNEL_COUNT), dtype=np.float64)
    if n == 0:
        return out

    classes = opcode_classes(opcodes)
    out[:, 1] = _window_fraction((classes == ARX).astype(np.int64), window)
    out[:, 2] = _window_fraction((classes == TABLE).astype(np.int64), window)
    out[:, 3] = _window_fraction((classes == MODULAR).astype(np.int64), window)

    ref_mask = (opcodes == int(Opcode.TBL)) | (opcodes == int(Opcode.LOAD))
    if matches and ref_mask.any():
        per_instr = np.zeros(n, dtype=np.float64)
        ref_idx = np.nonzero(ref_mask)[0]
        ref_ops = operands[ref_idx]
        for m in matches:
            hit = (ref_ops >= m.data_offset) & (ref_ops < m.end)
            if hit.any():
                sel = ref_idx[hit]
                per_instr[sel] = np.maximum(per_instr[sel], m.score)
        windowed = _sliding_max(per_instr, window)
        out[:, 0] = np.where(np.isfinite(windowed), windowed, 0.0)

    data = np.frombuffer(image.data, dtype=np.uint8)
    if data.size:
        data_mask = np.isin(opcodes, [int(o) for o in DATA_OPCODES])
        cache: dict[int, float] = {}
        for t in np.nonzero(data_mask)[0]:
            off = int(operands[t])
            h = cache.get(off)
            if h is None:
                lo = max(0, off - ENTROPY_WINDOW // 2)
                hi = min(data.size, off + ENTROPY_WINDOW // 2)
                h = shannon_entropy(data[lo:hi]) / 8.0 if hi > lo else 0.0
                cache[off] = h
            out[t, 4] = h
    return out


def signature_transform(channels: np.ndarray) -> np.ndarray:
    """Normalized discrete time integral of the channel matrix: the per-channel mean."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2 or channels.shape[0] == 0:
        raise EmptyMatrix("channel matrix needs at least one row")
    return channels.mean(axis=0)


def build_cfg(text: tuple[Instruction, ...]) -> ControlFlowGraph:
    """Linear-sweep control flow graph.

    Fall-through for ordinary instructions; JMP redirects, JZ and CALL add
    both their target and the fall-through, HALT/RET terminate.
    """
    n = len(text)
    edges = set()
    for t, ins in enumerate(text):
        op = ins.opcode
        if op in TERMINAL_OPCODES:
            continue
        if op == Opcode.JMP:
            edges.add((t, ins.operand))
            continue
        if op in (Opcode.JZ, Opcode.CALL):
            edges.add((t, ins.operand))
        if t + 1 < n:
            edges.add((t, t + 1))
    return ControlFlowGraph(node_count=n, edges=frozenset(edges))


def segment_functions(text: tuple[Instruction, ...]) -> list[tuple[int, int]]:
    """Half-open instruction ranges split at CALL targets (entry 0 included)."""
    n = len(text)
    if n == 0:
        return []
    entries = {0}
    entries.update(ins.operand for ins in text if ins.opcode == Opcode.CALL)
    starts = sorted(entries)
    bounds = starts + [n]
    return [(bounds[i], bounds[i + 1]) for i in range(len(starts)) if bounds[i] < bounds[i + 1]]


def extract_profile(
    image: BinaryImage,
    refs: list[ReferenceConstant],
    sigma: float | None = None,
    threshold: float = MATCH_THRESHOLD,
    window: int = DEFAULT_WINDOW,
) -> SignatureProfile:
    """Full single-sample extraction pass."""
    matches = scan_constants(image, refs, sigma=sigma, threshold=threshold)
    channels = channel_response(image, matches, window=window)
    diff_hist = opcode_differential(image.text)[1]
    means = signature_transform(channels) if channels.shape[0] else np.zeros(CHANNEL_COUNT)
    return SignatureProfile(
        channel_means=means,
        diff_hist=diff_hist,
        matches=matches,
        entropy_profile=entropy_profile(image.data),
        cfg=build_cfg(image.text),
        channels=channels,
    )


def dump_channels_csv(profile: SignatureProfile, path) -> None:
    """Per-instruction channel dump: t, ch1..ch5."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("t",) + CHANNEL_NAMES)
        for t, row in enumerate(profile.channels):
            writer.writerow([t] + [f"{v:.6f}" for v in row])


def dump_matches_csv(profile: SignatureProfile, path) -> None:
    """Sidecar match dump: constant_id, offset, score."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("constant_id", "offset", "score"))
        for m in profile.matches:
            writer.writerow((m.constant_id, m.data_offset, f"{m.score:.6f}"))
