"""SXE toy executable format: bit-exact parser and writer.

File layout (little-endian throughout):

    offset  size  field
    0       4     magic "SXE1" (0x53 0x58 0x45 0x31)
    4       1     version, always 0x01
    5       1     section count, always 0x02
    6       9     text section entry:  kind=0x00, offset u32, length u32
    15      9     data section entry:  kind=0x01, offset u32, length u32
    24      ...   text payload, then data payload, nothing after

Sections are required to be laid out canonically: text starts right after the
header, data right after text, and the file ends with the data payload.
Instructions are 4 bytes: opcode byte + 24-bit little-endian operand. The
operand is a branch target (absolute instruction index) for JMP/JZ/CALL, a
data-section byte offset for TBL/LOAD/STORE, and an immediate otherwise.

Parsing is strict: any malformed input raises exactly one typed error, no
best-effort recovery.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = b"SXE1"
VERSION = 1
HEADER_SIZE = 24
INSTRUCTION_SIZE = 4
OPERAND_LIMIT = 1 << 24


class Opcode(IntEnum):
    HALT = 0x00
    MOV = 0x01
    ADD = 0x02
    SUB = 0x03
    XOR = 0x04
    AND = 0x05
    OR = 0x06
    ROTL = 0x07
    ROTR = 0x08
    SHL = 0x09
    SHR = 0x0A
    MUL = 0x0B
    MODMUL = 0x0C
    LOAD = 0x0D
    STORE = 0x0E
    TBL = 0x0F
    JMP = 0x10
    JZ = 0x11
    CALL = 0x12
    RET = 0x13
    NOP = 0x14


MAX_OPCODE = max(Opcode)

BRANCH_OPCODES = frozenset({Opcode.JMP, Opcode.JZ, Opcode.CALL})
DATA_OPCODES = frozenset({Opcode.TBL, Opcode.LOAD, Opcode.STORE})
# Instructions with no fall-through edge.
TERMINAL_OPCODES = frozenset({Opcode.HALT, Opcode.RET})


class SxeError(Exception):
    """Base for all SXE format errors."""


class BadMagic(SxeError):
    pass


class BadVersion(SxeError):
    pass


class BadSectionTable(SxeError):
    """Section table malformed: bad count/kind, overlap, out of bounds."""


class BadOpcode(SxeError):
    def __init__(self, index: int):
        super().__init__(f"undefined opcode at instruction {index}")
        self.index = index


class BadOperand(SxeError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"operand out of range at instruction {index}: {reason}")
        self.index = index


class InvariantViolation(SxeError):
    """Image handed to the writer is internally inconsistent."""


@dataclass(frozen=True, slots=True)
class Instruction:
    opcode: int
    operand: int = 0


@dataclass(frozen=True)
class BinaryImage:
    """One parsed toy executable: a text section plus a data section.

    ``meta`` carries label annotations (family, obfuscation level, seed, ...)
    that are not part of the serialized format, so it is excluded from
    equality; write->parse round-trips compare equal regardless of labels.
    """

    text: tuple[Instruction, ...]
    data: bytes
    version: int = VERSION
    meta: dict | None = field(default=None, compare=False)

    @property
    def instruction_count(self) -> int:
        return len(self.text)


def _validate_instruction(index: int, opcode: int, operand: int, n_instr: int, data_len: int) -> None:
    if not (0 <= opcode <= MAX_OPCODE):
        raise BadOpcode(index)
    if not (0 <= operand < OPERAND_LIMIT):
        raise BadOperand(index, f"operand {operand} exceeds 24 bits")
    if opcode in BRANCH_OPCODES and operand >= n_instr:
        raise BadOperand(index, f"branch target {operand} >= instruction count {n_instr}")
    if opcode in DATA_OPCODES and operand >= data_len:
        raise BadOperand(index, f"data offset {operand} >= data length {data_len}")


def validate_image(image: BinaryImage) -> None:
    """Raise InvariantViolation unless ``image`` satisfies all format invariants."""
    if image.version != VERSION:
        raise InvariantViolation(f"unsupported version {image.version}")
    n = len(image.text)
    for i, ins in enumerate(image.text):
        try:
            _validate_instruction(i, ins.opcode, ins.operand, n, len(image.data))
        except SxeError as exc:
            raise InvariantViolation(str(exc)) from exc


def write_sxe(image: BinaryImage) -> bytes:
    """Serialize to the canonical byte layout. Deterministic: equal images give equal bytes."""
    validate_image(image)
    n = len(image.text)
    text_len = n * INSTRUCTION_SIZE
    header = MAGIC + struct.pack(
        "<BB" + "BII" * 2,
        VERSION,
        2,
        0, HEADER_SIZE, text_len,
        1, HEADER_SIZE + text_len, len(image.data),
    )
    if n:
        arr = np.empty((n, 4), dtype=np.uint8)
        opcodes = np.fromiter((ins.opcode for ins in image.text), dtype=np.uint32, count=n)
        operands = np.fromiter((ins.operand for ins in image.text), dtype=np.uint32, count=n)
        arr[:, 0] = opcodes
        arr[:, 1] = operands & 0xFF
        arr[:, 2] = (operands >> 8) & 0xFF
        arr[:, 3] = (operands >> 16) & 0xFF
        body = arr.tobytes()
    else:
        body = b""
    return header + body + image.data


def parse_sxe(raw: bytes) -> BinaryImage:
    """Parse bytes into a BinaryImage, or raise exactly one typed SxeError."""
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}")
    if len(raw) < 5 or raw[4] != VERSION:
        raise BadVersion("version byte must be 0x01")
    if len(raw) < 6 or raw[5] != 2:
        raise BadSectionTable("section count byte must be 2")
    if len(raw) < HEADER_SIZE:
        raise BadSectionTable(f"truncated section table ({len(raw)} bytes)")

    kind0, text_off, text_len = struct.unpack_from("<BII", raw, 6)
    kind1, data_off, data_len = struct.unpack_from("<BII", raw, 15)
    if kind0 != 0 or kind1 != 1:
        raise BadSectionTable(f"section kinds must be (0, 1), got ({kind0}, {kind1})")
    if text_off != HEADER_SIZE:
        raise BadSectionTable(f"text section must start at byte {HEADER_SIZE}, got {text_off}")
    if text_len % INSTRUCTION_SIZE != 0:
        raise BadSectionTable(f"text length {text_len} not a multiple of {INSTRUCTION_SIZE}")
    if data_off != text_off + text_len:
        raise BadSectionTable("sections must be contiguous (data right after text)")
    if data_off + data_len != len(raw):
        raise BadSectionTable(
            f"file length {len(raw)} does not match section table end {data_off + data_len}"
        )

    data = raw[data_off:data_off + data_len]
    n = text_len // INSTRUCTION_SIZE
    if n == 0:
        return BinaryImage(text=(), data=data)

    cols = np.frombuffer(raw, dtype=np.uint8, count=text_len, offset=text_off).reshape(n, 4)
    opcodes = cols[:, 0].astype(np.uint32)
    operands = (
        cols[:, 1].astype(np.uint32)
        | (cols[:, 2].astype(np.uint32) << 8)
        | (cols[:, 3].astype(np.uint32) << 16)
    )

    # First offending instruction wins; within one instruction the opcode
    # check precedes the operand check.
    bad_opcode = np.nonzero(opcodes > int(MAX_OPCODE))[0]
    first_bad_opcode = int(bad_opcode[0]) if bad_opcode.size else n

    valid = opcodes <= int(MAX_OPCODE)
    branch_mask = valid & np.isin(opcodes, [int(o) for o in BRANCH_OPCODES]) & (operands >= n)
    data_mask = valid & np.isin(opcodes, [int(o) for o in DATA_OPCODES]) & (operands >= data_len)
    bad_operand = np.nonzero(branch_mask | data_mask)[0]
    first_bad_operand = int(bad_operand[0]) if bad_operand.size else n

    if min(first_bad_opcode, first_bad_operand) < n:
        if first_bad_opcode <= first_bad_operand:
            raise BadOpcode(first_bad_opcode)
        i = first_bad_operand
        _validate_instruction(i, int(opcodes[i]), int(operands[i]), n, data_len)

    text = tuple(Instruction(int(op), int(arg)) for op, arg in zip(opcodes, operands))
    return BinaryImage(text=text, data=data)
