"""Instruction set: an RV32I/M integer subset plus the custom CFI opcodes.

All instructions are 4 bytes.  Custom CFI instructions live in the
``custom-0`` major opcode (0x0B) with a 5-bit sub-opcode in bits [11:7]
and a 20-bit unsigned payload (label, index or count) in bits [31:12].
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

# --------------------------------
# Registers
# --------------------------------

ABI_NAMES = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2",
    "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5",
    "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7",
    "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
]
REGISTERS = {name: i for i, name in enumerate(ABI_NAMES)}
REGISTERS.update({f"x{i}": i for i in range(32)})
REGISTERS["fp"] = 8

ZERO, RA, SP = 0, 1, 2
T0, T1 = 5, 6
S3 = 19
A0, A1 = 10, 11


class IsaError(Exception):
    """Operand out of range or an undecodable word."""


# --------------------------------
# Opcode tables
# --------------------------------

OP_LUI = 0x37
OP_AUIPC = 0x17
OP_JAL = 0x6F
OP_JALR = 0x67
OP_BRANCH = 0x63
OP_LOAD = 0x03
OP_STORE = 0x23
OP_IMM = 0x13
OP_REG = 0x33
OP_SYSTEM = 0x73
OP_CFI = 0x0B

# mnemonic -> (format, opcode, funct3, funct7)
BASE_OPS = {
    "lui": ("U", OP_LUI, 0, 0),
    "auipc": ("U", OP_AUIPC, 0, 0),
    "jal": ("J", OP_JAL, 0, 0),
    "jalr": ("I", OP_JALR, 0, 0),
    "beq": ("B", OP_BRANCH, 0, 0),
    "bne": ("B", OP_BRANCH, 1, 0),
    "blt": ("B", OP_BRANCH, 4, 0),
    "bge": ("B", OP_BRANCH, 5, 0),
    "bltu": ("B", OP_BRANCH, 6, 0),
    "bgeu": ("B", OP_BRANCH, 7, 0),
    "lb": ("I", OP_LOAD, 0, 0),
    "lh": ("I", OP_LOAD, 1, 0),
    "lw": ("I", OP_LOAD, 2, 0),
    "lbu": ("I", OP_LOAD, 4, 0),
    "lhu": ("I", OP_LOAD, 5, 0),
    "sb": ("S", OP_STORE, 0, 0),
    "sh": ("S", OP_STORE, 1, 0),
    "sw": ("S", OP_STORE, 2, 0),
    "addi": ("I", OP_IMM, 0, 0),
    "slti": ("I", OP_IMM, 2, 0),
    "sltiu": ("I", OP_IMM, 3, 0),
    "xori": ("I", OP_IMM, 4, 0),
    "ori": ("I", OP_IMM, 6, 0),
    "andi": ("I", OP_IMM, 7, 0),
    "slli": ("SH", OP_IMM, 1, 0x00),
    "srli": ("SH", OP_IMM, 5, 0x00),
    "srai": ("SH", OP_IMM, 5, 0x20),
    "add": ("R", OP_REG, 0, 0x00),
    "sub": ("R", OP_REG, 0, 0x20),
    "sll": ("R", OP_REG, 1, 0x00),
    "slt": ("R", OP_REG, 2, 0x00),
    "sltu": ("R", OP_REG, 3, 0x00),
    "xor": ("R", OP_REG, 4, 0x00),
    "srl": ("R", OP_REG, 5, 0x00),
    "sra": ("R", OP_REG, 5, 0x20),
    "or": ("R", OP_REG, 6, 0x00),
    "and": ("R", OP_REG, 7, 0x00),
    "mul": ("R", OP_REG, 0, 0x01),
    "mulh": ("R", OP_REG, 1, 0x01),
    "mulhsu": ("R", OP_REG, 2, 0x01),
    "mulhu": ("R", OP_REG, 3, 0x01),
    "div": ("R", OP_REG, 4, 0x01),
    "divu": ("R", OP_REG, 5, 0x01),
    "rem": ("R", OP_REG, 6, 0x01),
    "remu": ("R", OP_REG, 7, 0x01),
    "ecall": ("SYS", OP_SYSTEM, 0, 0x00000073),
    "ebreak": ("SYS", OP_SYSTEM, 0, 0x00100073),
    "mret": ("SYS", OP_SYSTEM, 0, 0x30200073),
}

# Custom CFI family: mnemonic -> sub-opcode (bits [11:7]).
CFI_OPS = {
    # management (shared by every monitor)
    "cfi_enable": 0,
    "cfi_disable": 1,
    "cfi_reset": 2,
    # EXCEC (label pair + setjmp/longjmp); HECFI reuses the label pair,
    # HCFI reuses setjmp/longjmp
    "cfi_call": 3,
    "cfi_jump": 4,
    "cfi_check": 5,
    "cfi_setjmp": 6,
    "cfi_longjmp": 7,
    # CET ENDBRANCH analogue
    "endbr": 8,
    # FIXER
    "fx_push": 9,
    "fx_ret": 10,
    "fx_policy": 11,
    # HAFIX
    "hafix_act": 12,
    "hafix_deact": 13,
    "hafix_check": 14,
    "hafix_act_rec": 15,
    "hafix_deact_rec": 16,
    # HCFI
    "hcfi_push": 17,
    "hcfi_pop": 18,
    "hcfi_set": 19,
    "hcfi_check": 20,
    # HECFI
    "hecfi_push": 21,
    "hecfi_pop": 22,
}
CFI_BY_SUBOP = {v: k for k, v in CFI_OPS.items()}
PAYLOAD_MAX = (1 << 20) - 1

MNEMONICS = tuple(BASE_OPS) + tuple(CFI_OPS)

_DECODE_BASE = {}
for _m, (_fmt, _op, _f3, _f7) in BASE_OPS.items():
    if _fmt == "SYS":
        _DECODE_BASE[("SYS", _f7)] = _m
    elif _fmt in ("U", "J"):
        _DECODE_BASE[(_op,)] = _m
    elif _fmt in ("I", "B", "S") :
        _DECODE_BASE[(_op, _f3)] = _m
    else:
        _DECODE_BASE[(_op, _f3, _f7)] = _m


def is_cfi(mnemonic: str) -> bool:
    return mnemonic in CFI_OPS


# --------------------------------
# Instruction
# --------------------------------

@dataclass(frozen=True)
class Instruction:
    """A single 4-byte instruction.

    ``imm`` is a byte offset for branches/jumps, the raw 20-bit field for
    ``lui``/``auipc`` and the shift amount for shift-immediates.  ``payload``
    is set for exactly the CFI family.  ``sym``/``reloc`` carry an unresolved
    symbol reference (``reloc`` in ``branch``, ``jal``, ``hi``, ``lo``) whose
    addend lives in ``imm``; encoded instructions never carry one.
    """

    mnemonic: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    payload: Optional[int] = None
    sym: Optional[str] = field(default=None)
    reloc: Optional[str] = field(default=None)

    def __post_init__(self):
        if self.mnemonic not in BASE_OPS and self.mnemonic not in CFI_OPS:
            raise IsaError(f"unknown mnemonic {self.mnemonic!r}")
        if (self.payload is not None) != (self.mnemonic in CFI_OPS):
            raise IsaError(f"{self.mnemonic}: payload present iff CFI instruction")

    @property
    def is_cfi(self) -> bool:
        return self.payload is not None

    def __str__(self):
        return format_instruction(self)


def cfi(mnemonic: str, payload: int = 0) -> Instruction:
    return Instruction(mnemonic, payload=payload)


class ControlFlowClass(enum.Enum):
    DIRECT_CALL = "DirectCall"
    INDIRECT_CALL = "IndirectCall"
    RETURN = "Return"
    DIRECT_JUMP = "DirectJump"
    INDIRECT_JUMP = "IndirectJump"
    COND_BRANCH = "CondBranch"
    CFI_INSTR = "CfiInstr"
    OTHER = "Other"


def classify(i: Instruction) -> ControlFlowClass:
    m = i.mnemonic
    if m == "jal":
        return ControlFlowClass.DIRECT_CALL if i.rd == RA else ControlFlowClass.DIRECT_JUMP
    if m == "jalr":
        if i.rd == RA:
            return ControlFlowClass.INDIRECT_CALL
        if i.rd == ZERO and i.rs1 == RA and i.imm == 0:
            return ControlFlowClass.RETURN
        return ControlFlowClass.INDIRECT_JUMP
    if m in CFI_OPS:
        return ControlFlowClass.CFI_INSTR
    if BASE_OPS[m][0] == "B":
        return ControlFlowClass.COND_BRANCH
    return ControlFlowClass.OTHER


# --------------------------------
# Encoding
# --------------------------------

def _check_reg(i: Instruction, *names):
    for n in ("rd", "rs1", "rs2"):
        v = getattr(i, n)
        if n in names:
            if not 0 <= v < 32:
                raise IsaError(f"{i.mnemonic}: {n}={v} out of range")
        elif v != 0:
            raise IsaError(f"{i.mnemonic}: {n} unused but set to {v}")


def _check_imm(i: Instruction, lo: int, hi: int, align: int = 1):
    if not lo <= i.imm <= hi or i.imm % align:
        raise IsaError(f"{i.mnemonic}: immediate {i.imm} out of range [{lo}, {hi}]"
                       + (f" or not {align}-aligned" if align > 1 else ""))


def encode(i: Instruction) -> int:
    if i.sym is not None:
        raise IsaError(f"{i.mnemonic}: unresolved symbol {i.sym!r}")
    if i.payload is not None:
        _check_reg(i)
        if i.imm:
            raise IsaError(f"{i.mnemonic}: immediate unused but set")
        if not 0 <= i.payload <= PAYLOAD_MAX:
            raise IsaError(f"{i.mnemonic}: payload {i.payload:#x} exceeds 20 bits")
        return (i.payload << 12) | (CFI_OPS[i.mnemonic] << 7) | OP_CFI

    fmt, op, f3, f7 = BASE_OPS[i.mnemonic]
    if fmt == "R":
        _check_reg(i, "rd", "rs1", "rs2")
        if i.imm:
            raise IsaError(f"{i.mnemonic}: immediate unused but set")
        return (f7 << 25) | (i.rs2 << 20) | (i.rs1 << 15) | (f3 << 12) | (i.rd << 7) | op
    if fmt == "I":
        _check_reg(i, "rd", "rs1")
        _check_imm(i, -2048, 2047)
        return ((i.imm & 0xFFF) << 20) | (i.rs1 << 15) | (f3 << 12) | (i.rd << 7) | op
    if fmt == "SH":
        _check_reg(i, "rd", "rs1")
        _check_imm(i, 0, 31)
        return (f7 << 25) | (i.imm << 20) | (i.rs1 << 15) | (f3 << 12) | (i.rd << 7) | op
    if fmt == "S":
        _check_reg(i, "rs1", "rs2")
        _check_imm(i, -2048, 2047)
        v = i.imm & 0xFFF
        return ((v >> 5) << 25) | (i.rs2 << 20) | (i.rs1 << 15) | (f3 << 12) | ((v & 0x1F) << 7) | op
    if fmt == "B":
        _check_reg(i, "rs1", "rs2")
        _check_imm(i, -4096, 4094, 2)
        v = i.imm & 0x1FFF
        return (((v >> 12) & 1) << 31) | (((v >> 5) & 0x3F) << 25) | (i.rs2 << 20) | (i.rs1 << 15) \
            | (f3 << 12) | (((v >> 1) & 0xF) << 8) | (((v >> 11) & 1) << 7) | op
    if fmt == "U":
        _check_reg(i, "rd")
        _check_imm(i, 0, 0xFFFFF)
        return (i.imm << 12) | (i.rd << 7) | op
    if fmt == "J":
        _check_reg(i, "rd")
        _check_imm(i, -(1 << 20), (1 << 20) - 2, 2)
        v = i.imm & 0x1FFFFF
        return (((v >> 20) & 1) << 31) | (((v >> 1) & 0x3FF) << 21) | (((v >> 11) & 1) << 20) \
            | (((v >> 12) & 0xFF) << 12) | (i.rd << 7) | op
    # SYS
    _check_reg(i)
    if i.imm:
        raise IsaError(f"{i.mnemonic}: immediate unused but set")
    return f7


def _sext(v: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (v & (sign - 1)) - (v & sign)


def decode(word: int) -> Instruction:
    if not 0 <= word <= 0xFFFFFFFF:
        raise IsaError(f"word {word:#x} is not 32-bit")
    op = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = word >> 25

    if op == OP_CFI:
        m = CFI_BY_SUBOP.get(rd)
        if m is None:
            raise IsaError(f"illegal CFI sub-opcode {rd} in {word:#010x}")
        return Instruction(m, payload=word >> 12)
    if op == OP_SYSTEM:
        m = _DECODE_BASE.get(("SYS", word))
        if m is None:
            raise IsaError(f"illegal system instruction {word:#010x}")
        return Instruction(m)
    if op in (OP_LUI, OP_AUIPC):
        return Instruction(_DECODE_BASE[(op,)], rd=rd, imm=word >> 12)
    if op == OP_JAL:
        imm = (((word >> 31) & 1) << 20) | (((word >> 12) & 0xFF) << 12) \
            | (((word >> 20) & 1) << 11) | (((word >> 21) & 0x3FF) << 1)
        return Instruction("jal", rd=rd, imm=_sext(imm, 21))
    if op == OP_REG:
        m = _DECODE_BASE.get((op, f3, f7))
        if m is None:
            raise IsaError(f"illegal R-type {word:#010x}")
        return Instruction(m, rd=rd, rs1=rs1, rs2=rs2)
    if op == OP_IMM and f3 in (1, 5):
        m = {(1, 0): "slli", (5, 0): "srli", (5, 0x20): "srai"}.get((f3, f7))
        if m is None:
            raise IsaError(f"illegal shift {word:#010x}")
        return Instruction(m, rd=rd, rs1=rs1, imm=rs2)
    m = _DECODE_BASE.get((op, f3))
    if m is None:
        raise IsaError(f"illegal instruction {word:#010x}")
    fmt = BASE_OPS[m][0]
    if fmt == "I":
        return Instruction(m, rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if fmt == "S":
        return Instruction(m, rs1=rs1, rs2=rs2, imm=_sext((f7 << 5) | rd, 12))
    # B
    imm = (((word >> 31) & 1) << 12) | (((word >> 7) & 1) << 11) \
        | (((word >> 25) & 0x3F) << 5) | (((word >> 8) & 0xF) << 1)
    return Instruction(m, rs1=rs1, rs2=rs2, imm=_sext(imm, 13))


# --------------------------------
# Text form
# --------------------------------

def _target(i: Instruction) -> str:
    if i.sym is None:
        return str(i.imm)
    if i.imm:
        return f"{i.sym}{i.imm:+d}"
    return i.sym


def format_instruction(i: Instruction) -> str:
    """Canonical assembly text; parses back to the same Instruction."""
    m = i.mnemonic
    r = ABI_NAMES
    if i.payload is not None:
        return f"{m} {i.payload:#x}"
    fmt = BASE_OPS[m][0]
    if fmt == "R":
        return f"{m} {r[i.rd]}, {r[i.rs1]}, {r[i.rs2]}"
    if fmt == "SH":
        return f"{m} {r[i.rd]}, {r[i.rs1]}, {i.imm}"
    if fmt == "I":
        if m == "jalr" or BASE_OPS[m][1] == OP_LOAD:
            return f"{m} {r[i.rd]}, {i.imm}({r[i.rs1]})"
        if i.reloc == "lo":
            return f"{m} {r[i.rd]}, {r[i.rs1]}, %lo({_target(i)})"
        return f"{m} {r[i.rd]}, {r[i.rs1]}, {i.imm}"
    if fmt == "S":
        return f"{m} {r[i.rs2]}, {i.imm}({r[i.rs1]})"
    if fmt == "B":
        if i.sym is None:
            return f"{m} {r[i.rs1]}, {r[i.rs2]}, .{i.imm:+d}"
        return f"{m} {r[i.rs1]}, {r[i.rs2]}, {_target(i)}"
    if fmt == "U":
        if i.reloc == "hi":
            return f"{m} {r[i.rd]}, %hi({_target(i)})"
        return f"{m} {r[i.rd]}, {i.imm:#x}"
    if fmt == "J":
        if i.sym is None:
            return f"{m} {r[i.rd]}, .{i.imm:+d}"
        return f"{m} {r[i.rd]}, {_target(i)}"
    return m
