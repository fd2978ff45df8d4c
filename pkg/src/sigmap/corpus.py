"""Deterministic synthetic corpus of toy executables with crypto fingerprints.

Five families: AES lockers (S-box table plus TBL/XOR round loops), RSA
encryptors (MODMUL square-and-multiply loops, the 65537 exponent bytes, a
high-entropy modulus blob), AES+RSA hybrids, ChaCha wipers (sigma constant
plus ADD/XOR/ROTL quarter rounds with rotations 16/12/8/7), and benign
filler programs with low-entropy data.

Obfuscation grades: level 1 inserts junk instructions and swaps opcode pairs
(ADD<->SUB with negated immediate, SHL k<->MUL 2^k); level 2 additionally
splits embedded constants into four chunks separated by random bytes and
shuffles the block layout behind unconditional jumps. Everything is driven
by splitmix64 streams derived from one master seed, so a corpus is
bit-identical across runs, platforms and worker counts.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .extraction import entropy_profile, shannon_entropy
from .fingerprints import AES_SBOX, CHACHA_SIGMA, RSA_E
from .rng import SplitMix64, derive_seed
from .sxe import BRANCH_OPCODES, DATA_OPCODES, BinaryImage, Instruction, Opcode, validate_image

FAMILIES = ("locker_aes", "crypto_rsa", "hybrid_aes_rsa", "wiper_chacha", "benign")
MALICIOUS_FAMILIES = FAMILIES[:4]

OPERAND_MASK = (1 << 24) - 1

TEXT_MIN, TEXT_MAX = 200, 2000
DATA_MIN, DATA_MAX = 256, 4096
DEFAULT_ENTROPY_THRESHOLD = 3.0

# Sub-stream tags mixed into a sample's seed.
_GEN_STREAM = 0
_OBF_STREAM = 1

SPLIT_CHUNKS = 4
SPLIT_GAP = 16
_SPLIT_MIN_LENGTH = 8  # constants shorter than this cannot form 4 chunks


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class FamilySpec:
    name: str
    sample_count: int
    rounds_per_block: int = 8
    obfuscation_level: int = 0

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise CorpusError(f"unknown family {self.name!r}")
        if self.sample_count <= 0:
            raise CorpusError("sample_count must be positive")
        if not 1 <= self.rounds_per_block <= 20:
            raise CorpusError("rounds_per_block must be in [1, 20]")
        if self.obfuscation_level not in (0, 1, 2):
            raise CorpusError("obfuscation_level must be 0, 1 or 2")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    family: str
    obfuscation: int
    rounds_per_block: int
    seed: int


@dataclass
class CorpusManifest:
    master_seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    tool_version: str = __version__


# ---------------------------------------------------------------------------
# sample text builders


def _imm(rng: SplitMix64) -> int:
    return rng.randrange(1 << 24)


def _aes_block(rng, rounds, sbox_off, state_off, state_len):
    """TBL/XOR round loop referencing the S-box; one window of the round
    pattern has class histogram (.25 ARX, .375 TABLE, 0, .25 MOVE, 0, .125 OTHER)."""
    body = [
        (Opcode.TBL, sbox_off + rng.randrange(256), False),
        (Opcode.LOAD, state_off + rng.randrange(state_len), False),
        (Opcode.MOV, _imm(rng), False),
    ]
    for _ in range(rounds):
        slot = state_off + rng.randrange(state_len)
        body += [
            (Opcode.TBL, sbox_off + rng.randrange(256), False),
            (Opcode.XOR, _imm(rng), False),
            (Opcode.LOAD, slot, False),
            (Opcode.TBL, sbox_off + rng.randrange(256), False),
            (Opcode.ADD, _imm(rng), False),
            (Opcode.STORE, slot, False),
            (Opcode.TBL, sbox_off + rng.randrange(256), False),
            (Opcode.AND, _imm(rng), False),
        ]
    return body


def _chacha_block(rng, rounds, sigma_off, key_off, key_len, state_off, state_len):
    """ADD/XOR/ROTL quarter rounds with the ChaCha rotation schedule."""
    body = [
        (Opcode.LOAD, sigma_off, False),
        (Opcode.LOAD, sigma_off + 4, False),
        (Opcode.LOAD, sigma_off + 8, False),
        (Opcode.LOAD, sigma_off + 12, False),
        (Opcode.LOAD, key_off + rng.randrange(key_len), False),
        (Opcode.MOV, _imm(rng), False),
    ]
    for _ in range(rounds):
        slot = state_off + rng.randrange(state_len)
        for rot in (16, 12, 8, 7):
            body += [
                (Opcode.ADD, _imm(rng), False),
                (Opcode.XOR, _imm(rng), False),
                (Opcode.ROTL, rot, False),
            ]
        body += [
            (Opcode.LOAD, slot, False),
            (Opcode.STORE, slot, False),
            (Opcode.NOP, 0, False),
            (Opcode.NOP, 0, False),
        ]
    return body


def _rsa_block(rng, rounds, e_off, mod_off, mod_len, state_off, state_len):
    """MODMUL square-and-multiply loop; the header MODMUL operand sits next to
    the exponent bytes so the scanner's context gate holds."""
    body = [
        (Opcode.LOAD, e_off, False),
        (Opcode.MODMUL, e_off + rng.randrange(32), False),
        (Opcode.LOAD, mod_off + rng.randrange(mod_len), False),
        (Opcode.MOV, _imm(rng), False),
    ]
    for _ in range(rounds):
        body += [
            (Opcode.MODMUL, mod_off + rng.randrange(mod_len), False),
            (Opcode.MODMUL, _imm(rng), False),
            (Opcode.MODMUL, e_off + rng.randrange(32), False),
            (Opcode.MODMUL, _imm(rng), False),
            (Opcode.LOAD, mod_off + rng.randrange(mod_len), False),
            (Opcode.STORE, state_off + rng.randrange(state_len), False),
            (Opcode.ADD, _imm(rng), False),
            (Opcode.NOP, 0, False),
        ]
    return body


_FILLER_MIX = (
    (40, Opcode.MOV),
    (55, Opcode.ADD),
    (75, Opcode.STORE),
    (85, Opcode.LOAD),
    (90, Opcode.OR),
    (95, Opcode.AND),
    (100, Opcode.NOP),
)


def _filler_block(rng, length, data_off, data_len):
    body = []
    for _ in range(length):
        roll = rng.randrange(100)
        op = next(code for limit, code in _FILLER_MIX if roll < limit)
        if op in (Opcode.STORE, Opcode.LOAD):
            body.append((op, data_off + rng.randrange(data_len), False))
        elif op is Opcode.NOP:
            body.append((op, 0, False))
        else:
            body.append((op, _imm(rng), False))
    return body


def _close_function(rng, body):
    """Loop tail shared by all function bodies: counter bump, back edge, return."""
    body.append((Opcode.ADD, _imm(rng), False))
    body.append((Opcode.JZ, 0, True))  # local target: function entry
    body.append((Opcode.RET, 0, False))
    return body


def _assemble(functions, rng) -> tuple[Instruction, ...]:
    """Lay out main (which CALLs every function) followed by the bodies,
    resolving local branch placeholders to absolute instruction indices."""
    main_len = 2 + len(functions) + 2
    entries = []
    at = main_len
    for body in functions:
        entries.append(at)
        at += len(body)

    text = [
        Instruction(Opcode.MOV, _imm(rng)),
        Instruction(Opcode.MOV, _imm(rng)),
    ]
    text += [Instruction(Opcode.CALL, entry) for entry in entries]
    text += [Instruction(Opcode.MOV, _imm(rng)), Instruction(Opcode.HALT, 0)]
    for entry, body in zip(entries, functions):
        for op, operand, is_local in body:
            text.append(Instruction(op, entry + operand if is_local else operand))
    return tuple(text)


def _benign_data(rng, size: int) -> bytes:
    """Low-entropy data: runs and short cycles over a narrow byte alphabet."""
    low = [rng.randrange(0x20) for _ in range(4)]
    high = [0xF0 + rng.randrange(0x10) for _ in range(2)]
    out = bytearray()
    while len(out) < size:
        kind = rng.randrange(4)
        run = 24 + rng.randrange(72)
        if kind == 0:
            out += bytes([0]) * run
        elif kind == 1:
            out += bytes([rng.choice(high)]) * run
        elif kind == 2:
            a, b = rng.choice(low), rng.choice(low)
            out += bytes([a, b]) * (run // 2)
        else:
            cycle = bytes(low)
            out += cycle * (run // len(cycle) + 1)
    return bytes(out[:size])


def _build_sample(spec: FamilySpec, sample_seed: int) -> tuple[BinaryImage, dict[str, int]]:
    """Un-obfuscated sample plus ground-truth fingerprint offsets."""
    rng = SplitMix64(derive_seed(sample_seed, _GEN_STREAM))
    text_budget = TEXT_MIN + rng.randrange(TEXT_MAX - TEXT_MIN + 1)
    data_target = DATA_MIN + rng.randrange(DATA_MAX - DATA_MIN + 1)

    fingerprints: dict[str, int] = {}
    if spec.name == "benign":
        data = _benign_data(rng, data_target)
        scratch_off, scratch_len = 0, len(data)
    else:
        pad = rng.rand_bytes(rng.randrange(65))
        segments = [pad]
        at = len(pad)
        layout: dict[str, tuple[int, int]] = {}

        def put(name, payload):
            nonlocal at
            layout[name] = (at, len(payload))
            segments.append(payload)
            at += len(payload)

        if spec.name in ("crypto_rsa", "hybrid_aes_rsa"):
            fingerprints["rsa_e"] = at
            put("e", RSA_E)
            put("modulus", rng.rand_bytes(256))
        if spec.name in ("locker_aes", "hybrid_aes_rsa"):
            fingerprints["aes_sbox"] = at
            for i in range(4):
                fingerprints[f"aes_sbox_q{i}"] = at + 64 * i
            put("sbox", AES_SBOX)
        if spec.name == "wiper_chacha":
            fingerprints["chacha_sigma"] = at
            put("sigma", CHACHA_SIGMA)
            put("key", rng.rand_bytes(256))
        put("state", rng.rand_bytes(64))
        body = b"".join(segments)
        tail = rng.rand_bytes(max(data_target - len(body), 16))
        data = body + tail
        scratch_off, scratch_len = layout["state"]

    functions = []
    if spec.name == "benign":
        used = 0
        while used < text_budget:
            length = 12 + rng.randrange(29)
            functions.append(_close_function(rng, _filler_block(rng, length, scratch_off, scratch_len)))
            used += length + 3
    else:
        filler_frac = 0.25 + 0.20 * rng.uniform()
        crypto_budget = int(text_budget * (1.0 - filler_frac))

        def aes():
            return _close_function(rng, _aes_block(
                rng, spec.rounds_per_block, fingerprints["aes_sbox"], scratch_off, scratch_len))

        builders = []
        if spec.name == "locker_aes":
            builders = [aes]
        elif spec.name == "crypto_rsa":
            e_off = fingerprints["rsa_e"]
            mod_off, mod_len = layout["modulus"]
            builders = [lambda: _close_function(rng, _rsa_block(
                rng, spec.rounds_per_block, e_off, mod_off, mod_len, scratch_off, scratch_len))]
        elif spec.name == "hybrid_aes_rsa":
            e_off = fingerprints["rsa_e"]
            mod_off, mod_len = layout["modulus"]
            builders = [
                aes,
                lambda: _close_function(rng, _rsa_block(
                    rng, spec.rounds_per_block, e_off, mod_off, mod_len, scratch_off, scratch_len)),
            ]
        elif spec.name == "wiper_chacha":
            sigma_off = fingerprints["chacha_sigma"]
            key_off, key_len = layout["key"]
            builders = [lambda: _close_function(rng, _chacha_block(
                rng, spec.rounds_per_block, sigma_off, key_off, key_len, scratch_off, scratch_len))]

        used = 0
        i = 0
        while used < crypto_budget or i < len(builders):
            body = builders[i % len(builders)]()
            functions.append(body)
            used += len(body)
            i += 1
        while used < text_budget:
            length = 12 + rng.randrange(29)
            functions.append(_close_function(rng, _filler_block(rng, length, scratch_off, scratch_len)))
            used += length + 3

    text = _assemble(functions, rng)
    meta = {
        "family": spec.name,
        "obfuscation": 0,
        "rounds_per_block": spec.rounds_per_block,
        "seed": sample_seed,
    }
    image = BinaryImage(text=text, data=data, meta=meta)
    validate_image(image)
    return image, fingerprints


def generate_sample_with_fingerprints(spec: FamilySpec, sample_seed: int):
    """Level-0 image and ground-truth constant offsets (for scanner tests)."""
    return _build_sample(spec, sample_seed)


def generate_sample(spec: FamilySpec, sample_seed: int) -> BinaryImage:
    """Deterministic sample at the spec's obfuscation level."""
    image, _ = _build_sample(spec, sample_seed)
    if spec.obfuscation_level:
        image = apply_obfuscation(image, spec.obfuscation_level, derive_seed(sample_seed, _OBF_STREAM))
        meta = dict(image.meta or {})
        meta["obfuscation"] = spec.obfuscation_level
        image = replace(image, meta=meta)
    return image


# ---------------------------------------------------------------------------
# obfuscation


def _remap_branches(text: list[Instruction], new_index: list[int]) -> None:
    for i, ins in enumerate(text):
        if ins.opcode in BRANCH_OPCODES:
            text[i] = Instruction(ins.opcode, new_index[ins.operand])


def _insert_junk(image: BinaryImage, rng: SplitMix64) -> BinaryImage:
    n = len(image.text)
    count = max(1, n // 10)
    positions = sorted(rng.randrange(n + 1) for _ in range(count))
    junk = []
    for _ in range(count):
        if rng.randrange(2):
            junk.append(Instruction(Opcode.NOP, 0))
        else:
            junk.append(Instruction(Opcode.MOV, _imm(rng)))

    shift = [bisect.bisect_right(positions, t) for t in range(n)]
    new_index = [t + shift[t] for t in range(n)]
    out: list[Instruction] = []
    j = 0
    for t, ins in enumerate(image.text):
        while j < count and positions[j] == t:
            out.append(junk[j])
            j += 1
        if ins.opcode in BRANCH_OPCODES:
            ins = Instruction(ins.opcode, new_index[ins.operand])
        out.append(ins)
    out.extend(junk[j:])
    return replace(image, text=tuple(out))


def _substitute_opcodes(image: BinaryImage, rng: SplitMix64) -> BinaryImage:
    out = []
    for ins in image.text:
        op, arg = ins.opcode, ins.operand
        if op == Opcode.ADD and rng.randrange(2):
            ins = Instruction(Opcode.SUB, (-arg) & OPERAND_MASK)
        elif op == Opcode.SUB and rng.randrange(2):
            ins = Instruction(Opcode.ADD, (-arg) & OPERAND_MASK)
        elif op == Opcode.SHL and arg <= 8 and rng.randrange(2):
            ins = Instruction(Opcode.MUL, 1 << arg)
        elif op == Opcode.MUL and arg and (arg & (arg - 1)) == 0 and arg <= 256 and rng.randrange(2):
            ins = Instruction(Opcode.SHL, arg.bit_length() - 1)
        out.append(ins)
    return replace(image, text=tuple(out))


def _split_constants(image: BinaryImage, rng: SplitMix64) -> BinaryImage:
    """Break each embedded reference constant into SPLIT_CHUNKS pieces with
    SPLIT_GAP random bytes between them; data-referencing operands are shifted
    to keep pointing at the bytes they pointed at before."""
    data = image.data
    points: list[int] = []
    for const in (AES_SBOX, CHACHA_SIGMA):
        if len(const) < _SPLIT_MIN_LENGTH:
            continue
        chunk = len(const) // SPLIT_CHUNKS
        start = 0
        while True:
            off = data.find(const, start)
            if off < 0:
                break
            points.extend(off + k * chunk for k in range(1, SPLIT_CHUNKS))
            start = off + len(const)
    if not points:
        return image
    points.sort()

    pieces = []
    prev = 0
    for p in points:
        pieces.append(data[prev:p])
        pieces.append(rng.rand_bytes(SPLIT_GAP))
        prev = p
    pieces.append(data[prev:])
    new_data = b"".join(pieces)

    out = []
    for ins in image.text:
        if ins.opcode in DATA_OPCODES:
            moved = ins.operand + SPLIT_GAP * bisect.bisect_right(points, ins.operand)
            ins = Instruction(ins.opcode, moved)
        out.append(ins)
    return replace(image, text=tuple(out), data=new_data)


def _shuffle_cfg(image: BinaryImage, rng: SplitMix64) -> BinaryImage:
    """Reorder instruction blocks, chaining original control flow back
    together with appended unconditional jumps."""
    n = len(image.text)
    if n < 8:
        return image
    starts = [0]
    at = 0
    while True:
        at += 6 + rng.randrange(19)
        if at >= n:
            break
        starts.append(at)
    blocks = [(starts[i], starts[i + 1] if i + 1 < len(starts) else n) for i in range(len(starts))]
    order = list(range(1, len(blocks)))
    rng.shuffle(order)
    order = [0] + order

    new_index = [0] * n
    at = 0
    for b in order:
        s, e = blocks[b]
        for t in range(s, e):
            new_index[t] = at
            at += 1
        if b + 1 < len(blocks):
            at += 1  # room for the continuation jump

    out: list[Instruction] = []
    for b in order:
        s, e = blocks[b]
        for t in range(s, e):
            ins = image.text[t]
            if ins.opcode in BRANCH_OPCODES:
                ins = Instruction(ins.opcode, new_index[ins.operand])
            out.append(ins)
        if b + 1 < len(blocks):
            out.append(Instruction(Opcode.JMP, new_index[blocks[b + 1][0]]))
    return replace(image, text=tuple(out))


def apply_obfuscation(image: BinaryImage, level: int, seed: int) -> BinaryImage:
    """Seeded obfuscation transform; level 0 is the identity. Output parses."""
    if level not in (0, 1, 2):
        raise CorpusError(f"obfuscation level must be 0, 1 or 2, got {level}")
    if level == 0:
        return image
    rng = SplitMix64(seed)
    image = _insert_junk(image, rng)
    image = _substitute_opcodes(image, rng)
    if level == 2:
        image = _split_constants(image, rng)
        image = _shuffle_cfg(image, rng)
    validate_image(image)
    return image


# ---------------------------------------------------------------------------
# corpus-level operations


def entropy_filter(image: BinaryImage, threshold_bits: float) -> bool:
    """Keep iff the max 64-byte-window entropy of the data section reaches the
    threshold. Empty data never passes."""
    if not 0.0 <= threshold_bits <= 8.0:
        raise ValueError(f"threshold must be in [0, 8], got {threshold_bits}")
    if not image.data:
        return False
    profile = entropy_profile(image.data)
    peak = float(profile.max()) if profile.size else shannon_entropy(image.data)
    return peak >= threshold_bits


def default_specs(obfuscation_level: int = 0) -> list[FamilySpec]:
    """Dataset mirror: 120/95/60/30 malicious samples plus 100 benign, with
    each malicious family's count split across slow/medium/fast encryption
    (rounds per block 2/8/14) so speed-vs-accuracy reporting has spread."""
    counts = (("locker_aes", 120), ("crypto_rsa", 95), ("hybrid_aes_rsa", 60), ("wiper_chacha", 30))
    rounds = (2, 8, 14)
    specs = []
    for name, total in counts:
        base = total // 3
        parts = [base + (1 if i < total - base * 3 else 0) for i in range(3)]
        for part, r in zip(parts, rounds):
            specs.append(FamilySpec(name, part, rounds_per_block=r, obfuscation_level=obfuscation_level))
    specs.append(FamilySpec("benign", 100, rounds_per_block=1, obfuscation_level=obfuscation_level))
    return specs


def generate_corpus(
    specs: list[FamilySpec],
    master_seed: int,
    out_dir,
    entropy_threshold: float = DEFAULT_ENTROPY_THRESHOLD,
) -> CorpusManifest:
    """Write one .sxe per sample plus a JSON-lines manifest (written last, so
    a failed run leaves no manifest). Malicious samples must pass the entropy
    prefilter; a failure indicates a generator bug and aborts."""
    from .sxe import write_sxe

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CorpusManifest(master_seed=master_seed)
    blobs: list[tuple[str, bytes]] = []
    index = 0
    for spec in specs:
        for _ in range(spec.sample_count):
            seed = derive_seed(master_seed, index)
            image = generate_sample(spec, seed)
            if spec.name != "benign" and not entropy_filter(image, entropy_threshold):
                raise CorpusError(
                    f"non-encrypting {spec.name} sample at index {index} (seed {seed})"
                )
            name = f"{spec.name}_{index:04d}.sxe"
            blobs.append((name, write_sxe(image)))
            manifest.entries.append(ManifestEntry(
                path=name,
                family=spec.name,
                obfuscation=spec.obfuscation_level,
                rounds_per_block=spec.rounds_per_block,
                seed=seed,
            ))
            index += 1

    for name, blob in blobs:
        (out / name).write_bytes(blob)
    write_manifest(manifest, out / "manifest.jsonl")
    return manifest


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [json.dumps(
        {"master_seed": manifest.master_seed, "tool_version": manifest.tool_version},
        sort_keys=True,
    )]
    for e in manifest.entries:
        lines.append(json.dumps({
            "path": e.path,
            "family": e.family,
            "obfuscation": e.obfuscation,
            "rounds_per_block": e.rounds_per_block,
            "seed": e.seed,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise CorpusError(f"empty manifest {path}")
    header = json.loads(lines[0])
    manifest = CorpusManifest(
        master_seed=header["master_seed"],
        tool_version=header.get("tool_version", "unknown"),
    )
    seen = set()
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj["path"] in seen:
            raise CorpusError(f"duplicate manifest path {obj['path']}")
        seen.add(obj["path"])
        manifest.entries.append(ManifestEntry(
            path=obj["path"],
            family=obj["family"],
            obfuscation=obj["obfuscation"],
            rounds_per_block=obj["rounds_per_block"],
            seed=obj["seed"],
        ))
    return manifest
