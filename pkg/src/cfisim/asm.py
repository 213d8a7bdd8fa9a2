"""Line-oriented assembler.

Grammar, one statement per line::

    # comment
    .func NAME            start a function (NAME becomes a global symbol)
    label:                label the next instruction (or data word)
        mnemonic a, b, c  instruction or pseudo-instruction
    .endfunc
    .data                 following lines are data
    label:
        .word 1, -2, sym, sym+4
        .space 16         zero-filled bytes, multiple of 4
    .text                 back to code

Registers take ABI or ``xN`` names.  Branch and jump targets are
``symbol``, ``symbol+off`` or ``.+off`` (pc-relative).  A trailing
``#@inj`` comment marks an instruction as injected by instrumentation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .isa import (BASE_OPS, CFI_OPS, PAYLOAD_MAX, REGISTERS, RA, ZERO, Instruction,
                  IsaError)

INJECTED_TAG = "#@inj"


class AsmError(Exception):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class SourceFunction:
    name: str
    body: list = field(default_factory=list)        # list[Instruction]
    labels: dict = field(default_factory=dict)      # label -> index into body
    lines: list = field(default_factory=list)       # source line per instruction
    injected: set = field(default_factory=set)      # indices tagged #@inj
    line: int = 0


@dataclass
class DataWord:
    value: int = 0
    sym: Optional[str] = None


@dataclass
class Source:
    functions: list = field(default_factory=list)   # list[SourceFunction]
    data: list = field(default_factory=list)        # list[DataWord]
    data_labels: dict = field(default_factory=dict)  # label -> word index


_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_MEM_RE = re.compile(r"^(.*)\((\w+)\)$")
_RELOC_RE = re.compile(r"^%(hi|lo)\((.+)\)$")
_SYM_RE = re.compile(r"^([A-Za-z_$][\w.$]*)\s*(?:([+-])\s*(\w+))?$")


def _int(tok: str, line) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise AsmError(f"bad immediate {tok!r}", line) from None


def _reg(tok: str, line) -> int:
    r = REGISTERS.get(tok.strip())
    if r is None:
        raise AsmError(f"unknown register {tok!r}", line)
    return r


def _symref(tok: str, line):
    """Parse ``sym``, ``sym+off``, ``.+off`` -> (sym or None, addend)."""
    tok = tok.strip()
    if tok.startswith("."):
        rest = tok[1:].replace(" ", "")
        if not rest or rest[0] not in "+-":
            raise AsmError(f"bad relative target {tok!r}", line)
        return None, _int(rest, line)
    m = _SYM_RE.match(tok)
    if not m:
        raise AsmError(f"bad symbol reference {tok!r}", line)
    sym, sign, off = m.groups()
    addend = 0
    if off is not None:
        addend = _int(off, line) * (-1 if sign == "-" else 1)
    return sym, addend


def _split_ops(text: str):
    return [t.strip() for t in text.split(",")] if text.strip() else []


def _mem(tok: str, line):
    m = _MEM_RE.match(tok.replace(" ", ""))
    if not m:
        raise AsmError(f"expected imm(reg), got {tok!r}", line)
    off = m.group(1) or "0"
    return _int(off, line), _reg(m.group(2), line)


def _branch(m, rs1, rs2, target, line):
    sym, addend = _symref(target, line)
    if sym is None:
        return Instruction(m, rs1=rs1, rs2=rs2, imm=addend)
    return Instruction(m, rs1=rs1, rs2=rs2, imm=addend, sym=sym, reloc="branch")


def _jal(rd, target, line):
    sym, addend = _symref(target, line)
    if sym is None:
        return Instruction("jal", rd=rd, imm=addend)
    return Instruction("jal", rd=rd, imm=addend, sym=sym, reloc="jal")


def _li(rd, value):
    value &= 0xFFFFFFFF
    signed = value - (1 << 32) if value & 0x80000000 else value
    if -2048 <= signed <= 2047:
        return [Instruction("addi", rd=rd, rs1=ZERO, imm=signed)]
    lo = ((value & 0xFFF) ^ 0x800) - 0x800
    hi = ((value - lo) >> 12) & 0xFFFFF
    out = [Instruction("lui", rd=rd, imm=hi)]
    if lo:
        out.append(Instruction("addi", rd=rd, rs1=rd, imm=lo))
    return out


_SWAPPED = {"bgt": "blt", "ble": "bge", "bgtu": "bltu", "bleu": "bgeu"}
_ZERO_BRANCH = {
    "beqz": ("beq", False), "bnez": ("bne", False), "bltz": ("blt", False),
    "bgez": ("bge", False), "blez": ("bge", True), "bgtz": ("blt", True),
}


def parse_instruction(mnemonic: str, ops: list, line=None) -> list:
    """Expand one (pseudo-)instruction into a list of Instructions."""
    m = mnemonic.lower()
    n = len(ops)

    def need(k):
        if n != k:
            raise AsmError(f"{m} takes {k} operand(s), got {n}", line)

    if m in CFI_OPS:
        if n > 1:
            raise AsmError(f"{m} takes at most one operand", line)
        payload = _int(ops[0], line) if n else 0
        if not 0 <= payload <= PAYLOAD_MAX:
            raise AsmError(f"{m}: payload {payload:#x} exceeds 20 bits", line)
        return [Instruction(m, payload=payload)]

    if m == "nop":
        need(0)
        return [Instruction("addi")]
    if m == "ret":
        need(0)
        return [Instruction("jalr", rd=ZERO, rs1=RA)]
    if m == "li":
        need(2)
        return _li(_reg(ops[0], line), _int(ops[1], line))
    if m == "la":
        need(2)
        rd = _reg(ops[0], line)
        sym, addend = _symref(ops[1], line)
        if sym is None:
            raise AsmError("la needs a symbol", line)
        return [Instruction("lui", rd=rd, imm=addend, sym=sym, reloc="hi"),
                Instruction("addi", rd=rd, rs1=rd, imm=addend, sym=sym, reloc="lo")]
    if m == "mv":
        need(2)
        return [Instruction("addi", rd=_reg(ops[0], line), rs1=_reg(ops[1], line))]
    if m == "not":
        need(2)
        return [Instruction("xori", rd=_reg(ops[0], line), rs1=_reg(ops[1], line), imm=-1)]
    if m == "neg":
        need(2)
        return [Instruction("sub", rd=_reg(ops[0], line), rs2=_reg(ops[1], line))]
    if m == "seqz":
        need(2)
        return [Instruction("sltiu", rd=_reg(ops[0], line), rs1=_reg(ops[1], line), imm=1)]
    if m == "snez":
        need(2)
        return [Instruction("sltu", rd=_reg(ops[0], line), rs2=_reg(ops[1], line))]
    if m == "j":
        need(1)
        return [_jal(ZERO, ops[0], line)]
    if m == "call":
        need(1)
        return [_jal(RA, ops[0], line)]
    if m == "tail":
        raise AsmError("tail calls are not supported", line)
    if m == "jr":
        need(1)
        return [Instruction("jalr", rd=ZERO, rs1=_reg(ops[0], line))]
    if m in _ZERO_BRANCH:
        need(2)
        real, swap = _ZERO_BRANCH[m]
        r = _reg(ops[0], line)
        a, b = (ZERO, r) if swap else (r, ZERO)
        return [_branch(real, a, b, ops[1], line)]
    if m in _SWAPPED:
        need(3)
        return [_branch(_SWAPPED[m], _reg(ops[1], line), _reg(ops[0], line), ops[2], line)]

    if m not in BASE_OPS:
        raise AsmError(f"unknown mnemonic {mnemonic!r}", line)
    fmt, opcode, _, _ = BASE_OPS[m]
    if m == "jal":
        if n == 1:
            return [_jal(RA, ops[0], line)]
        need(2)
        return [_jal(_reg(ops[0], line), ops[1], line)]
    if m == "jalr":
        if n == 1:
            if "(" in ops[0]:
                off, rs1 = _mem(ops[0], line)
                return [Instruction("jalr", rd=RA, rs1=rs1, imm=off)]
            return [Instruction("jalr", rd=RA, rs1=_reg(ops[0], line))]
        if n == 2:
            off, rs1 = _mem(ops[1], line) if "(" in ops[1] else (0, _reg(ops[1], line))
            return [Instruction("jalr", rd=_reg(ops[0], line), rs1=rs1, imm=off)]
        need(3)
        return [Instruction("jalr", rd=_reg(ops[0], line), rs1=_reg(ops[1], line),
                            imm=_int(ops[2], line))]
    if fmt == "R":
        need(3)
        return [Instruction(m, rd=_reg(ops[0], line), rs1=_reg(ops[1], line),
                            rs2=_reg(ops[2], line))]
    if fmt == "SYS":
        need(0)
        return [Instruction(m)]
    if fmt == "U":
        need(2)
        rd = _reg(ops[0], line)
        rm = _RELOC_RE.match(ops[1])
        if rm:
            if rm.group(1) != "hi":
                raise AsmError(f"{m} takes %hi()", line)
            sym, addend = _symref(rm.group(2), line)
            return [Instruction(m, rd=rd, imm=addend, sym=sym, reloc="hi")]
        return [Instruction(m, rd=rd, imm=_int(ops[1], line))]
    if fmt == "B":
        need(3)
        return [_branch(m, _reg(ops[0], line), _reg(ops[1], line), ops[2], line)]
    if fmt == "S":
        need(2)
        off, rs1 = _mem(ops[1], line)
        return [Instruction(m, rs1=rs1, rs2=_reg(ops[0], line), imm=off)]
    if opcode == 0x03:   # loads
        need(2)
        off, rs1 = _mem(ops[1], line)
        return [Instruction(m, rd=_reg(ops[0], line), rs1=rs1, imm=off)]
    # I / SH arithmetic
    need(3)
    rd, rs1 = _reg(ops[0], line), _reg(ops[1], line)
    rm = _RELOC_RE.match(ops[2])
    if rm:
        if rm.group(1) != "lo" or m != "addi":
            raise AsmError("only addi takes %lo()", line)
        sym, addend = _symref(rm.group(2), line)
        return [Instruction(m, rd=rd, rs1=rs1, imm=addend, sym=sym, reloc="lo")]
    return [Instruction(m, rd=rd, rs1=rs1, imm=_int(ops[2], line))]


def parse(text: str, allow_loose: bool = True) -> Source:
    """Parse source text into functions and data.

    Instructions outside ``.func`` go into an anonymous function named ``""``
    when ``allow_loose`` is set, otherwise they are an error.
    """
    src = Source()
    seen = set()
    cur: Optional[SourceFunction] = None
    loose: Optional[SourceFunction] = None
    in_data = False
    pending_labels = []

    def define(name, lineno):
        if name in seen:
            raise AsmError(f"duplicate label {name!r}", lineno)
        seen.add(name)

    for lineno, raw in enumerate(text.splitlines(), 1):
        injected = INJECTED_TAG in raw
        line = raw.split("#", 1)[0].strip()
        while True:
            lm = _LABEL_RE.match(line)
            if not lm:
                break
            name = lm.group(1)
            define(name, lineno)
            pending_labels.append((name, lineno))
            line = line[lm.end():].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        head = parts[0]
        rest = parts[1] if len(parts) > 1 else ""

        if head == ".func":
            if cur is not None:
                raise AsmError(f".func {rest} inside function {cur.name}", lineno)
            if pending_labels:
                raise AsmError("label before .func", pending_labels[0][1])
            name = rest.strip()
            if not _SYM_RE.match(name) or "+" in name:
                raise AsmError(f"bad function name {name!r}", lineno)
            define(name, lineno)
            cur = SourceFunction(name, line=lineno)
            src.functions.append(cur)
            in_data = False
            continue
        if head == ".endfunc":
            if cur is None:
                raise AsmError(".endfunc without .func", lineno)
            if pending_labels:
                raise AsmError("label at end of function", pending_labels[0][1])
            cur = None
            continue
        if head == ".data":
            if cur is not None:
                raise AsmError(".data inside function", lineno)
            in_data = True
            continue
        if head == ".text":
            in_data = False
            continue

        if in_data:
            for name, _ in pending_labels:
                src.data_labels[name] = len(src.data)
            pending_labels = []
            if head == ".word":
                for tok in _split_ops(rest):
                    try:
                        src.data.append(DataWord(int(tok, 0) & 0xFFFFFFFF))
                    except ValueError:
                        sym, addend = _symref(tok, lineno)
                        if sym is None:
                            raise AsmError(f"bad .word operand {tok!r}", lineno) from None
                        src.data.append(DataWord(addend, sym))
            elif head == ".space":
                size = _int(rest.strip(), lineno)
                if size < 0 or size % 4:
                    raise AsmError(".space size must be a non-negative multiple of 4", lineno)
                src.data.extend(DataWord() for _ in range(size // 4))
            else:
                raise AsmError(f"unexpected {head!r} in .data", lineno)
            continue

        if head.startswith("."):
            raise AsmError(f"unknown directive {head!r}", lineno)
        target = cur
        if target is None:
            if not allow_loose:
                raise AsmError("instruction outside .func", lineno)
            if loose is None:
                loose = SourceFunction("", line=lineno)
                src.functions.append(loose)
            target = loose
        for name, _ in pending_labels:
            target.labels[name] = len(target.body)
        pending_labels = []
        try:
            expanded = parse_instruction(head, _split_ops(rest), lineno)
        except IsaError as e:
            raise AsmError(str(e), lineno) from None
        for ins in expanded:
            if injected:
                target.injected.add(len(target.body))
            target.body.append(ins)
            target.lines.append(lineno)

    if cur is not None:
        raise AsmError(f"function {cur.name} missing .endfunc", cur.line)
    if pending_labels:
        name, lineno = pending_labels[0]
        if in_data:
            for name, _ in pending_labels:
                src.data_labels[name] = len(src.data)
        else:
            raise AsmError(f"label {name!r} does not precede an instruction", lineno)
    return src


def resolve(ins: Instruction, pc: int, symbols: dict) -> Instruction:
    """Return ``ins`` with its symbol reference replaced by an immediate."""
    if ins.sym is None:
        return ins
    if ins.sym not in symbols:
        raise AsmError(f"undefined symbol {ins.sym!r}")
    target = (symbols[ins.sym] + ins.imm) & 0xFFFFFFFF
    if ins.reloc in ("branch", "jal"):
        imm = target - pc
        if imm >= 1 << 31:
            imm -= 1 << 32
        elif imm < -(1 << 31):
            imm += 1 << 32
    elif ins.reloc == "hi":
        imm = ((target + 0x800) >> 12) & 0xFFFFF
    elif ins.reloc == "lo":
        imm = ((target & 0xFFF) ^ 0x800) - 0x800
    else:
        raise AsmError(f"unknown relocation {ins.reloc!r}")
    return Instruction(ins.mnemonic, rd=ins.rd, rs1=ins.rs1, rs2=ins.rs2, imm=imm,
                       payload=ins.payload)


def assemble(text: str):
    """Assemble ``text`` at offset 0.

    Returns ``(instructions, symbols)``: resolved instructions in order and a
    map from every label/function/data name to its byte offset.  Data (if
    any) is placed right after the code.
    """
    src = parse(text)
    symbols = {}
    offset = 0
    for fn in src.functions:
        if fn.name:
            symbols[fn.name] = offset
        for label, idx in fn.labels.items():
            symbols[label] = offset + 4 * idx
        offset += 4 * len(fn.body)
    for label, idx in src.data_labels.items():
        symbols[label] = offset + 4 * idx
    out = []
    pc = 0
    for fn in src.functions:
        for ins, lineno in zip(fn.body, fn.lines):
            try:
                out.append(resolve(ins, pc, symbols))
            except AsmError as e:
                raise AsmError(str(e), lineno) from None
            pc += 4
    for w in src.data:
        if w.sym is not None and w.sym not in symbols:
            raise AsmError(f"undefined symbol {w.sym!r} in .word")
    return out, symbols
