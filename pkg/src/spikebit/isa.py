"""Instruction set: eleven opcodes in four categories, fixed 32-bit words.

Word layout (bit 31 is the MSB)::

    [31:27] opcode (5 bits, 11 assigned)
    Config  (ENA, CONF):        [26:22] param_id   [21:0] value
    Command (PROC, LIN, RST, END): [26:0] module-select bitmask
    Memory  (KERL, KERD, ACTL, ACTS): [26:23] mem_id  [22] direction  [21:0] address
    Wait    (WAIT):             [26:22] module_id  [21:0] condition_id

Config parameter registry (version 1). Ids 0-7 are the base set; 8+ extend it
for the drain/replica sequencing conventions:

    0 STRIDE      kernel stride select          8 ENABLE    module id / replica mask
    1 PARALLEL    windows per replica (P)       9 TIMESTEP  current spike plane t
    2 SHIFT       requant or avg-pool shift    10 reserved
    3 BUFSEL      src<<4 | dst buffer ids      11 DIN       input row width / features
    4 WMEM        weight memory id             12 DOUT      output row width
    5 BITBASE     1D write bit offset          13 PAD       padding per side
    6 COUNT       active output channels       14 POOLMODE  0 avg, 1 max
    7 TSTEPS      spike train length T         15 OUTMODE   0 planes, 1 raw output
                                               16 WROWBASE  linear weight row base
                                               17 DRAIN     reset drain pointer
                                               18 PSUMBITS  accumulator width check
                                               19 LAYER     layer marker for reports

On disk a program is little-endian words behind an 8-byte header.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import FieldOverflow, IllegalOpcode, ParseError

# Opcode assignments (Table-style ordering; END lands at 0b00101).
OPCODES = {
    "ENA": 0, "CONF": 1, "PROC": 2, "LIN": 3, "RST": 4, "END": 5,
    "KERL": 6, "KERD": 7, "ACTL": 8, "ACTS": 9, "WAIT": 10,
}
MNEMONICS = {v: k for k, v in OPCODES.items()}

CAT_CONFIG = "config"
CAT_COMMAND = "command"
CAT_MEMORY = "memory"
CAT_WAIT = "wait"

CATEGORY = {
    "ENA": CAT_CONFIG, "CONF": CAT_CONFIG,
    "PROC": CAT_COMMAND, "LIN": CAT_COMMAND, "RST": CAT_COMMAND,
    "END": CAT_COMMAND,
    "KERL": CAT_MEMORY, "KERD": CAT_MEMORY, "ACTL": CAT_MEMORY,
    "ACTS": CAT_MEMORY,
    "WAIT": CAT_WAIT,
}

# Config parameter ids.
P_STRIDE = 0
P_PARALLEL = 1
P_SHIFT = 2
P_BUFSEL = 3
P_WMEM = 4
P_BITBASE = 5
P_COUNT = 6
P_TSTEPS = 7
P_ENABLE = 8
P_TIMESTEP = 9
P_DIN = 11
P_DOUT = 12
P_PAD = 13
P_POOLMODE = 14
P_OUTMODE = 15
P_WROWBASE = 16
P_DRAIN = 17
P_PSUMBITS = 18
P_LAYER = 19

DIR_LOAD = 0
DIR_STORE = 1

_MASK22 = (1 << 22) - 1
_MASK27 = (1 << 27) - 1


@dataclass(frozen=True)
class Instruction:
    op: str
    a: int = 0      # param / mem_id / module_id / mask
    b: int = 0      # value / address / condition
    d: int = 0      # memory direction bit

    @property
    def category(self):
        return CATEGORY[self.op]


def _fit(name, value, bits):
    if not 0 <= value < (1 << bits):
        raise FieldOverflow(f"{name}={value} does not fit in {bits} bits")
    return value


def encode(ins: Instruction) -> int:
    """Pack one instruction into its 32-bit word."""
    if ins.op not in OPCODES:
        raise IllegalOpcode(f"unknown mnemonic {ins.op!r}")
    word = OPCODES[ins.op] << 27
    cat = CATEGORY[ins.op]
    if cat == CAT_CONFIG:
        word |= _fit("param", ins.a, 5) << 22
        word |= _fit("value", ins.b, 22)
    elif cat == CAT_COMMAND:
        word |= _fit("mask", ins.a, 27)
    elif cat == CAT_MEMORY:
        word |= _fit("mem", ins.a, 4) << 23
        word |= _fit("dir", ins.d, 1) << 22
        word |= _fit("addr", ins.b, 22)
    else:
        word |= _fit("module", ins.a, 5) << 22
        word |= _fit("cond", ins.b, 22)
    return word


def decode(word: int) -> Instruction:
    """Unpack a 32-bit word; inverse of encode on valid words."""
    if not 0 <= word < (1 << 32):
        raise FieldOverflow(f"word {word:#x} is not 32-bit")
    op_bits = word >> 27
    op = MNEMONICS.get(op_bits)
    if op is None:
        raise IllegalOpcode(f"opcode {op_bits:#07b} is unassigned")
    cat = CATEGORY[op]
    if cat == CAT_CONFIG:
        return Instruction(op, a=(word >> 22) & 0x1F, b=word & _MASK22)
    if cat == CAT_COMMAND:
        return Instruction(op, a=word & _MASK27)
    if cat == CAT_MEMORY:
        return Instruction(op, a=(word >> 23) & 0xF, b=word & _MASK22,
                           d=(word >> 22) & 1)
    return Instruction(op, a=(word >> 22) & 0x1F, b=word & _MASK22)


# Builders used by codegen; direction bits follow the opcode's data flow.
def conf(param, value):
    return Instruction("CONF", a=param, b=value)


def ena(param, value):
    return Instruction("ENA", a=param, b=value)


def proc(mask):
    return Instruction("PROC", a=mask)


def lin(mask):
    return Instruction("LIN", a=mask)


def rst(mask):
    return Instruction("RST", a=mask)


def end():
    return Instruction("END")


def kerl(mem, addr):
    return Instruction("KERL", a=mem, b=addr, d=DIR_LOAD)


def kerd(mem, addr):
    return Instruction("KERD", a=mem, b=addr, d=DIR_LOAD)


def actl(mem, addr):
    return Instruction("ACTL", a=mem, b=addr, d=DIR_LOAD)


def acts(mem, addr):
    return Instruction("ACTS", a=mem, b=addr, d=DIR_STORE)


def wait(module, cond=0):
    return Instruction("WAIT", a=module, b=cond)


# ----------------------------------------------------------------------------
# Program container and validation
# ----------------------------------------------------------------------------

REQUIRED_BEFORE_PROC = (P_ENABLE, P_COUNT, P_TIMESTEP, P_DIN, P_DOUT, P_TSTEPS)
REQUIRED_BEFORE_LIN = (P_ENABLE, P_COUNT, P_TIMESTEP, P_DIN, P_TSTEPS)


def validate_program(instrs):
    """Structural invariants: one final END, configs precede dependents."""
    if not instrs:
        raise ParseError("empty program")
    ends = [i for i, ins in enumerate(instrs) if ins.op == "END"]
    if len(ends) != 1 or ends[0] != len(instrs) - 1:
        raise ParseError("program must contain exactly one END, in final position")
    seen = set()
    for i, ins in enumerate(instrs):
        if ins.op in ("CONF", "ENA"):
            seen.add(ins.a)
        elif ins.op == "PROC":
            missing = [p for p in REQUIRED_BEFORE_PROC if p not in seen]
            if missing:
                raise ParseError(f"instr {i}: PROC before CONF of params {missing}")
        elif ins.op == "LIN":
            missing = [p for p in REQUIRED_BEFORE_LIN if p not in seen]
            if missing:
                raise ParseError(f"instr {i}: LIN before CONF of params {missing}")
    return instrs


# ----------------------------------------------------------------------------
# Binary container
# ----------------------------------------------------------------------------

MAGIC = b"SBPR"
BIN_VERSION = 1


def program_to_bytes(instrs) -> bytes:
    words = [encode(ins) for ins in instrs]
    head = MAGIC + BIN_VERSION.to_bytes(2, "little") + b"\x00\x00"
    head += len(words).to_bytes(4, "little")
    return head + b"".join(w.to_bytes(4, "little") for w in words)


def program_from_bytes(blob: bytes):
    if blob[:4] != MAGIC:
        raise ParseError("not a program binary (bad magic)")
    version = int.from_bytes(blob[4:6], "little")
    if version != BIN_VERSION:
        raise ParseError(f"unsupported program version {version}")
    count = int.from_bytes(blob[8:12], "little")
    body = blob[12:]
    if len(body) != 4 * count:
        raise ParseError(f"program body holds {len(body) // 4} words, header says {count}")
    return [decode(int.from_bytes(body[4 * i:4 * i + 4], "little"))
            for i in range(count)]


def write_program(path, instrs):
    with open(path, "wb") as f:
        f.write(program_to_bytes(instrs))


def read_program(path):
    with open(path, "rb") as f:
        return program_from_bytes(f.read())


# ----------------------------------------------------------------------------
# Assembly text
# ----------------------------------------------------------------------------

def format_instruction(ins: Instruction) -> str:
    cat = CATEGORY[ins.op]
    if cat == CAT_CONFIG:
        return f"{ins.op} p={ins.a} v={ins.b}"
    if cat == CAT_COMMAND:
        return "END" if ins.op == "END" and ins.a == 0 else f"{ins.op} m={ins.a:#x}"
    if cat == CAT_MEMORY:
        return f"{ins.op} mem={ins.a} d={ins.d} a={ins.b}"
    return f"{ins.op} mod={ins.a} c={ins.b}"


def disassemble(instrs_or_words, annotate=False) -> str:
    """One mnemonic line per instruction; reassembles to identical words."""
    lines = []
    for i, item in enumerate(instrs_or_words):
        ins = item if isinstance(item, Instruction) else None
        if ins is None:
            try:
                ins = decode(item)
            except IllegalOpcode as e:
                raise IllegalOpcode(f"word {i}: {e}") from e
        text = format_instruction(ins)
        if annotate:
            text = f"{text:<28}# {i:6d}  {encode(ins):08x}"
        lines.append(text)
    return "\n".join(lines) + "\n"


def assemble(text: str):
    """Parse assembly text back into instructions."""
    instrs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op = parts[0].upper()
        if op not in OPCODES:
            raise ParseError(f"line {lineno}: unknown mnemonic {op!r}")
        fields = {}
        for tok in parts[1:]:
            if "=" not in tok:
                raise ParseError(f"line {lineno}: bad field {tok!r}")
            key, val = tok.split("=", 1)
            try:
                fields[key] = int(val, 0)
            except ValueError as e:
                raise ParseError(f"line {lineno}: bad value {tok!r}") from e
        cat = CATEGORY[op]
        try:
            if cat == CAT_CONFIG:
                ins = Instruction(op, a=fields.pop("p"), b=fields.pop("v"))
            elif cat == CAT_COMMAND:
                ins = Instruction(op, a=fields.pop("m", 0))
            elif cat == CAT_MEMORY:
                ins = Instruction(op, a=fields.pop("mem"), b=fields.pop("a"),
                                  d=fields.pop("d", DIR_LOAD))
            else:
                ins = Instruction(op, a=fields.pop("mod"), b=fields.pop("c", 0))
        except KeyError as e:
            raise ParseError(f"line {lineno}: missing field {e}") from e
        if fields:
            raise ParseError(f"line {lineno}: unexpected fields {sorted(fields)}")
        encode(ins)  # range-check now, not at write time
        instrs.append(ins)
    return instrs
