import json
import math
import pathlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigmap.corpus import FamilySpec, generate_sample
from sigmap.extraction import CLASS_COUNT
from sigmap.hierarchy import (
    DESCRIPTOR_LENGTH,
    DESCRIPTOR_SLOTS,
    EmptySeries,
    Prototype,
    SeriesTooShort,
    atomic_signatures,
    build_descriptor,
    build_workflow_tensor,
    cp_decompose,
    default_prototypes,
    dump_descriptors_csv,
    multiscale_diff_score,
    pool_level,
    prototype_response_series,
)
from sigmap.fingerprints import default_references
from sigmap.pipeline import descriptor_for_image, profile_image
from sigmap.config import RunConfig
from sigmap.sxe import Instruction, Opcode

GOLDEN = pathlib.Path(__file__).parent / "data" / "golden_descriptor.json"


def ins(*codes):
    return tuple(Instruction(op, 0) for op in codes)


# -- atomic signatures ---------------------------------------------------------

def test_atomic_exact_prototype_match_scores_one():
    # 8-instruction window matching the TABLE prototype histogram exactly:
    # 3 TBL, 2 ARX, 2 MOVE, 1 OTHER
    window = (
        Opcode.TBL, Opcode.XOR, Opcode.LOAD, Opcode.TBL,
        Opcode.ADD, Opcode.STORE, Opcode.TBL, Opcode.AND,
    )
    text = tuple(Instruction(op, 0) for op in window)
    scores = atomic_signatures(text)
    names = [p.prototype_id for p in default_prototypes()]
    assert scores[names.index("TABLE")] == pytest.approx(1.0)


def test_atomic_single_window_at_sigma_distance():
    proto = Prototype("X", (1.0, 0.0, 0.0, 0.0, 0.0, 0.0), sigma=0.25)
    # window histogram (0.75 ARX, 0.25 MOVE): distance to mu is 0.25*sqrt(2)
    text = ins(*[Opcode.ADD] * 6, Opcode.MOV, Opcode.MOV)
    score = atomic_signatures(text, (proto,))[0]
    assert score == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_atomic_duplication_invariant():
    text = ins(*[Opcode.ADD, Opcode.XOR, Opcode.TBL, Opcode.MOV] * 4)  # 16 instructions
    once = atomic_signatures(text)
    twice = atomic_signatures(text + text)
    assert np.allclose(once, twice, atol=1e-12)


def test_atomic_short_stream_zero():
    assert not atomic_signatures(ins(Opcode.NOP)).any()


def test_atomic_decreases_with_distance():
    proto = (Prototype("ARXish", (1.0, 0, 0, 0, 0, 0), sigma=0.2),)
    pure = ins(*[Opcode.ADD] * 8)
    mixed = ins(*[Opcode.ADD] * 6, Opcode.MOV, Opcode.MOV)
    far = ins(*[Opcode.MOV] * 8)
    s = [atomic_signatures(t, proto)[0] for t in (pure, mixed, far)]
    assert s[0] > s[1] > s[2]


# -- pooling ---------------------------------------------------------------------

def test_pool_constant_series():
    out = pool_level(np.full((7, 5), 0.4))
    assert out.shape == (15,)
    assert np.allclose(out[:5], 0.4)
    assert np.allclose(out[5:10], 0.4)
    assert np.allclose(out[10:], 0.0)


def test_pool_two_point_variance():
    out = pool_level(np.array([[0.0], [1.0]]))
    assert out == pytest.approx([0.5, 1.0, 0.25])


def test_pool_permutation_invariant_and_errors():
    rng = np.random.default_rng(0)
    series = rng.random((10, 3))
    assert np.allclose(pool_level(series), pool_level(series[rng.permutation(10)]))
    with pytest.raises(EmptySeries):
        pool_level(np.zeros((0, 3)))


# -- multiscale difference score --------------------------------------------------

def test_diff_score_examples():
    assert multiscale_diff_score([1.0, 1.0, 1.0, 1.0]) == 0.0
    # hand-computed difference table: means 1, 0, 0 -> score 1.0
    assert multiscale_diff_score([0.0, 1.0, 2.0, 3.0]) == pytest.approx(1.0)
    with pytest.raises(SeriesTooShort):
        multiscale_diff_score([1.0])


def test_diff_score_truncation_stability_geometric():
    series = 0.9 ** np.arange(64)
    assert abs(multiscale_diff_score(series, 4) - multiscale_diff_score(series, 6)) < 1e-3


def test_diff_score_term_bound():
    # k-th term bounded by max |diff^k| / k!
    rng = np.random.default_rng(5)
    f = rng.random(40)
    d = np.diff(f, n=3)
    term3 = multiscale_diff_score(f, 3) - multiscale_diff_score(f, 2)
    assert abs(term3) <= np.abs(d).max() / math.factorial(3) + 1e-12


# -- workflow tensor ----------------------------------------------------------------

def test_tensor_single_cluster_constant_channels():
    channels = np.full((40, 5), 0.6)
    t = build_workflow_tensor([(0, 40)], np.array([0]), channels)
    assert t.shape == (4, 5, 4)
    assert np.allclose(t[0], 0.6)
    assert not t[1:].any()


def test_tensor_disjoint_phases():
    channels = np.zeros((40, 5))
    channels[:10, 0] = 1.0   # phase 0 activity in cluster 0's function
    channels[30:, 1] = 1.0   # phase 3 activity in cluster 1's function
    t = build_workflow_tensor([(0, 10), (10, 40)], np.array([0, 1]), channels)
    assert t[0, 0, 0] == pytest.approx(1.0)
    assert t[1, 1, 3] == pytest.approx(1.0)
    assert t[0, :, 1:].sum() == 0.0


def test_tensor_empty_channels():
    t = build_workflow_tensor([], np.array([], dtype=int), np.zeros((0, 5)))
    assert not t.any()


# -- cp decomposition -----------------------------------------------------------------

def test_cp_rank1_exact_recovery():
    rng = np.random.default_rng(7)
    a, b, c = rng.standard_normal(4), rng.standard_normal(5), rng.standard_normal(4)
    tensor = np.einsum("i,j,k->ijk", a, b, c)
    out = cp_decompose(tensor, rank=1, seed=13)
    assert out.error < 1e-6
    expected = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
    assert out.weights[0] == pytest.approx(expected, rel=1e-9)
    for f in out.factors:
        assert np.allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-9)


def test_cp_zero_tensor():
    out = cp_decompose(np.zeros((4, 5, 4)), rank=3, seed=1)
    assert not out.weights.any()
    assert out.error == 0.0
    for f in out.factors:
        assert np.allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_cp_error_monotone_non_increasing(seed):
    tensor = np.random.default_rng(seed).random((4, 5, 4))
    out = cp_decompose(tensor, rank=3, seed=seed)
    diffs = np.diff(out.sweep_errors)
    assert diffs.size == 0 or diffs.max() <= 1e-12
    assert np.all(np.diff(out.weights) <= 1e-12)  # sorted descending


def test_cp_weights_descending_and_unit_columns():
    tensor = np.random.default_rng(3).random((4, 5, 4))
    out = cp_decompose(tensor, rank=3, seed=4)
    assert np.all(out.weights[:-1] >= out.weights[1:] - 1e-12)
    assert np.all(out.weights >= 0)
    for f in out.factors:
        assert np.allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-9)


# -- full descriptor -------------------------------------------------------------------

def test_descriptor_layout_and_slots():
    assert DESCRIPTOR_LENGTH == 34
    assert len(DESCRIPTOR_SLOTS) == 34
    assert DESCRIPTOR_SLOTS[0] == "channel.constant_match"
    assert DESCRIPTOR_SLOTS[5] == "atomic.ARX"
    assert DESCRIPTOR_SLOTS[-1] == "entropy.max"


def test_descriptor_deterministic(run_config):
    image = generate_sample(FamilySpec("hybrid_aes_rsa", 1), 19)
    d1 = descriptor_for_image(image, run_config)
    d2 = descriptor_for_image(image, run_config)
    assert np.array_equal(d1.values, d2.values)
    assert d1.layout_version == 1


def test_descriptor_benign_nop_like_sample(run_config):
    text = ins(*[Opcode.NOP] * 64)
    from sigmap.sxe import BinaryImage
    image = BinaryImage(text=text, data=b"")
    profile = profile_image(image, run_config)
    desc = build_descriptor(image, profile, run_config.descriptor_config())
    values = desc.values
    assert not values[:5].any()                    # all channel means zero
    assert np.all(values[5:10] < 0.5)              # no prototype dominates
    assert values[31] == 0.0                       # diff score of constant series


def test_descriptor_locker_vs_benign_contrast(run_config):
    locker = descriptor_for_image(generate_sample(FamilySpec("locker_aes", 1), 23), run_config)
    benign = descriptor_for_image(generate_sample(FamilySpec("benign", 1), 23), run_config)
    slots = list(DESCRIPTOR_SLOTS)
    cm = slots.index("channel.constant_match")
    table = slots.index("atomic.TABLE")
    assert locker.values[cm] > 0.0
    assert benign.values[cm] == 0.0
    assert locker.values[table] > benign.values[table]


def test_descriptor_golden_layout(run_config):
    """Slot order and values for a pinned sample are frozen; regenerate the
    golden file deliberately if the layout version is bumped."""
    image = generate_sample(FamilySpec("locker_aes", 1, rounds_per_block=8), 4242)
    desc = descriptor_for_image(image, run_config)
    golden = json.loads(GOLDEN.read_text())
    assert golden["layout_version"] == desc.layout_version
    assert tuple(golden["slots"]) == DESCRIPTOR_SLOTS
    assert np.allclose(desc.values, np.array(golden["values"]), atol=1e-9)


def test_descriptor_csv_dump(tmp_path, run_config):
    image = generate_sample(FamilySpec("wiper_chacha", 1), 31)
    desc = descriptor_for_image(image, run_config)
    out = tmp_path / "descriptors.csv"
    dump_descriptors_csv(["a.sxe"], [desc], out)
    lines = out.read_text().splitlines()
    assert lines[0] == "path," + ",".join(DESCRIPTOR_SLOTS)
    assert len(lines) == 2 and lines[1].startswith("a.sxe,")
