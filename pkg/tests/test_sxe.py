import struct

import pytest
from hypothesis import given, settings, strategies as st

from sigmap.corpus import FamilySpec, generate_sample
from sigmap.sxe import (
    BRANCH_OPCODES,
    DATA_OPCODES,
    HEADER_SIZE,
    MAGIC,
    BadMagic,
    BadOpcode,
    BadOperand,
    BadSectionTable,
    BadVersion,
    BinaryImage,
    Instruction,
    InvariantViolation,
    Opcode,
    SxeError,
    parse_sxe,
    write_sxe,
)


def halt_image(data=b""):
    return BinaryImage(text=(Instruction(Opcode.HALT, 0),), data=data)


def test_minimal_file_layout():
    blob = write_sxe(halt_image())
    # magic(4) + version(1) + count(1) + 2 section entries(18) + one instruction(4)
    assert len(blob) == 4 + 1 + 1 + 18 + 4 == 28
    assert blob[:4] == MAGIC
    assert blob[4] == 1
    assert blob[5] == 2
    kind0, text_off, text_len = struct.unpack_from("<BII", blob, 6)
    kind1, data_off, data_len = struct.unpack_from("<BII", blob, 15)
    assert (kind0, text_off, text_len) == (0, HEADER_SIZE, 4)
    assert (kind1, data_off, data_len) == (1, HEADER_SIZE + 4, 0)
    parsed = parse_sxe(blob)
    assert parsed.instruction_count == 1
    assert parsed == halt_image()


def test_wrong_magic_rejected():
    blob = bytearray(write_sxe(halt_image()))
    blob[3] = ord("0")  # "SXE0"
    with pytest.raises(BadMagic):
        parse_sxe(bytes(blob))


def test_wrong_version_rejected():
    blob = bytearray(write_sxe(halt_image()))
    blob[4] = 2
    with pytest.raises(BadVersion):
        parse_sxe(bytes(blob))


@pytest.mark.parametrize("mutate", [
    lambda b: b[:5] + bytes([3]) + b[6:],                 # section count
    lambda b: b[:6] + bytes([1]) + b[7:],                 # text kind
    lambda b: b[:HEADER_SIZE - 2],                        # truncated table
    lambda b: b + b"x",                                   # trailing junk
    lambda b: b[:7] + bytes([99]) + b[8:],                # text offset not 24
])
def test_section_table_errors(mutate):
    blob = write_sxe(halt_image(b"\x01\x02"))
    with pytest.raises(BadSectionTable):
        parse_sxe(mutate(blob))


def test_bad_opcode_reports_instruction_index():
    # corrupt a generator-emitted sample: instruction 3's opcode byte -> 0xFF
    image = generate_sample(FamilySpec("locker_aes", 1), sample_seed=5)
    blob = bytearray(write_sxe(image))
    blob[HEADER_SIZE + 3 * 4] = 0xFF
    with pytest.raises(BadOpcode) as err:
        parse_sxe(bytes(blob))
    assert err.value.index == 3


def test_bad_operand_branch_out_of_range():
    blob = write_sxe(BinaryImage(text=(Instruction(Opcode.JMP, 0), Instruction(Opcode.HALT, 0)), data=b""))
    raw = bytearray(blob)
    raw[HEADER_SIZE + 1] = 9  # JMP target 9 >= 2 instructions
    with pytest.raises(BadOperand) as err:
        parse_sxe(bytes(raw))
    assert err.value.index == 0


def test_bad_operand_data_out_of_range():
    image = BinaryImage(text=(Instruction(Opcode.LOAD, 1), Instruction(Opcode.HALT, 0)), data=b"\x00\x01")
    raw = bytearray(write_sxe(image))
    raw[HEADER_SIZE + 0] = int(Opcode.TBL)
    raw[HEADER_SIZE + 1] = 2  # offset 2 >= data length 2
    with pytest.raises(BadOperand):
        parse_sxe(bytes(raw))


def test_writer_rejects_invalid_image():
    bad = BinaryImage(text=(Instruction(0xFF, 0),), data=b"")
    with pytest.raises(InvariantViolation):
        write_sxe(bad)
    with pytest.raises(InvariantViolation):
        write_sxe(BinaryImage(text=(Instruction(Opcode.JMP, 5),), data=b""))


def test_one_data_byte_changes_one_output_byte():
    a = BinaryImage(text=(Instruction(Opcode.HALT, 0),), data=bytes(range(32)))
    changed = bytearray(range(32))
    changed[17] ^= 0x40
    b = BinaryImage(text=a.text, data=bytes(changed))
    diff = [i for i, (x, y) in enumerate(zip(write_sxe(a), write_sxe(b))) if x != y]
    assert diff == [HEADER_SIZE + 4 + 17]


def test_meta_not_part_of_equality():
    with_meta = BinaryImage(text=halt_image().text, data=b"", meta={"family": "benign"})
    assert with_meta == halt_image()
    assert parse_sxe(write_sxe(with_meta)) == with_meta


# -- property tests ---------------------------------------------------------

def instructions(draw, n, data_len):
    ops = []
    for _ in range(n):
        opcode = draw(st.sampled_from(list(Opcode)))
        if opcode in BRANCH_OPCODES:
            operand = draw(st.integers(0, n - 1))
        elif opcode in DATA_OPCODES:
            if data_len == 0:
                opcode = Opcode.NOP
                operand = 0
            else:
                operand = draw(st.integers(0, data_len - 1))
        else:
            operand = draw(st.integers(0, (1 << 24) - 1))
        ops.append(Instruction(opcode, operand))
    return tuple(ops)


@st.composite
def images(draw, max_text=60, max_data=120):
    data = draw(st.binary(max_size=max_data))
    n = draw(st.integers(1, max_text))
    return BinaryImage(text=instructions(draw, n, len(data)), data=data)


@settings(max_examples=120, deadline=None)
@given(images())
def test_roundtrip_identity(image):
    assert parse_sxe(write_sxe(image)) == image


@settings(max_examples=120, deadline=None)
@given(images())
def test_writer_deterministic(image):
    assert write_sxe(image) == write_sxe(image)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_parser_totality_random_blobs(blob):
    try:
        parse_sxe(blob)
    except SxeError:
        pass  # exactly one typed error is the contract; crashes are not


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=120), st.integers(0, 200))
def test_parser_totality_near_valid(data, flip_at):
    blob = bytearray(write_sxe(halt_image(data)))
    if blob:
        blob[flip_at % len(blob)] ^= 0xA5
    try:
        parse_sxe(bytes(blob))
    except SxeError:
        pass
