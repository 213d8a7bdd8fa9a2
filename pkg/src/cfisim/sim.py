"""Fetch/decode/execute loop with an attached CFI monitor.

The image's code words are decoded once up front; the loop then executes
them against a flat little-endian memory.  Control transfers and CFI
instructions are reported to the monitor in retire order.  Ordinary
instructions are reported (as ``Retire`` events) only while the monitor
waits for a specific next instruction, since no monitor reacts to them
otherwise; ``full_trace=True`` reports every instruction.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

from .isa import ControlFlowClass as CF, classify, decode
from .monitors import (CFI, DIRECT_CALL, INDIRECT_CALL, INDIRECT_JUMP, OK, RETIRE, RETURN,
                       CfiEvent, Monitor, Verdict)
from .program import CodeImage

DEFAULT_FUEL = 10 ** 8
MASK = 0xFFFFFFFF


class SimError(Exception):
    """Run aborted for a reason other than a CFI exception."""


class FuelExhausted(SimError):
    pass


class MemoryFault(SimError):
    pass


# --------------------------------
# Faults and interrupts
# --------------------------------

@dataclass(frozen=True)
class OverwriteReturnSlot:
    """Write ``new_addr`` to memory at ``frame_addr`` (or ``sp + sp_offset``)."""

    new_addr: Union[int, str]
    frame_addr: Optional[Union[int, str]] = None
    sp_offset: int = 0


@dataclass(frozen=True)
class CorruptRegisterBeforeIndirect:
    reg: int
    new_addr: Union[int, str]


@dataclass(frozen=True)
class ForcePc:
    new_addr: Union[int, str]


@dataclass(frozen=True)
class FaultSpec:
    """One data-memory or register manipulation applied before an instruction.

    Exactly one of ``at_retired_count`` and ``at_pc`` must be given; ``at_pc``
    may be an address, a symbol or ``symbol+offset``.
    """

    action: object
    at_retired_count: Optional[int] = None
    at_pc: Optional[Union[int, str]] = None

    def __post_init__(self):
        if (self.at_retired_count is None) == (self.at_pc is None):
            raise ValueError("FaultSpec needs exactly one trigger")
        if not isinstance(self.action, (OverwriteReturnSlot, CorruptRegisterBeforeIndirect,
                                        ForcePc)):
            raise ValueError(f"unknown fault action {self.action!r}")


def _reg_index(r) -> int:
    from .isa import REGISTERS
    if isinstance(r, int):
        return r
    return REGISTERS[r] if r in REGISTERS else int(r.lstrip("x"))


def fault_from_dict(d: dict) -> FaultSpec:
    """``{"at_pc": "site1", "action": "ForcePc", "new_addr": "gadget"}`` style records."""
    kind = d.get("action")
    if kind == "OverwriteReturnSlot":
        act = OverwriteReturnSlot(d["new_addr"], d.get("frame_addr"), int(d.get("sp_offset", 0)))
    elif kind == "CorruptRegisterBeforeIndirect":
        act = CorruptRegisterBeforeIndirect(_reg_index(d["reg"]), d["new_addr"])
    elif kind == "ForcePc":
        act = ForcePc(d["new_addr"])
    else:
        raise ValueError(f"unknown fault action {kind!r}")
    return FaultSpec(act, d.get("at_retired_count"), d.get("at_pc"))


@dataclass(frozen=True)
class IrqPlan:
    """Retired-instruction counts at which the external IRQ line is raised."""

    assert_at: tuple = ()


# --------------------------------
# Results
# --------------------------------

@dataclass(frozen=True)
class Completed:
    outputs: tuple              # (a0, result-region words)


@dataclass(frozen=True)
class CfiException:
    kind: Verdict
    pc: int
    retired: int


@dataclass
class RunStats:
    retired_total: int = 0
    retired_cfi: int = 0
    verdict: object = None
    irqs_serviced: int = 0
    irq_max_defer_cycles: int = 0
    calls_direct: int = 0
    calls_indirect: int = 0
    irq_log: list = field(default_factory=list)   # (asserted, serviced, pc, monitor busy)

    @property
    def completed(self) -> bool:
        return isinstance(self.verdict, Completed)

    @property
    def outputs(self):
        return self.verdict.outputs if self.completed else None

    def as_record(self) -> dict:
        v = self.verdict
        rec = {"retired_total": self.retired_total, "retired_cfi": self.retired_cfi,
               "irqs_serviced": self.irqs_serviced,
               "irq_max_defer_cycles": self.irq_max_defer_cycles}
        if isinstance(v, Completed):
            rec.update(verdict="Completed", a0=v.outputs[0], result=list(v.outputs[1]))
        else:
            rec.update(verdict="CfiException", kind=v.kind.value, pc=v.pc, retired=v.retired)
        return rec


def overhead(base: RunStats, instr: RunStats) -> float:
    """Relative retired-instruction overhead in percent, rounded to 2 decimals."""
    if base.retired_total <= 0:
        raise ValueError("baseline retired no instructions")
    f = Fraction(instr.retired_total - base.retired_total, base.retired_total) * 100
    return round(float(f), 2)


# --------------------------------
# Execution
# --------------------------------

_EVENT_OF = {CF.DIRECT_CALL: DIRECT_CALL, CF.INDIRECT_CALL: INDIRECT_CALL,
             CF.RETURN: RETURN, CF.INDIRECT_JUMP: INDIRECT_JUMP, CF.CFI_INSTR: CFI}


def _s32(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def _predecode(image: CodeImage):
    out = []
    for w in image.words:
        ins = decode(w)
        ev = _EVENT_OF.get(classify(ins))
        out.append((ins.mnemonic, ins.rd, ins.rs1, ins.rs2, ins.imm, ev, ins.payload or 0))
    return out


class Machine:
    """Architectural state: registers, pc, memory."""

    def __init__(self, image: CodeImage):
        self.image = image
        self.base = image.base
        self.mem = bytearray(image.mem_size)
        for k, w in enumerate(image.words):
            struct.pack_into("<I", self.mem, 4 * k, w)
        off = image.data_start - image.base
        for k, w in enumerate(image.data):
            struct.pack_into("<I", self.mem, off + 4 * k, w & MASK)
        self.regs = [0] * 32
        self.regs[2] = image.stack_top
        self.pc = image.entry
        self.mepc = 0
        self.code_end = image.code_end

    def load_word(self, addr: int) -> int:
        off = addr - self.base
        if off < 0 or off + 4 > len(self.mem) or addr & 3:
            raise MemoryFault(f"load of {addr:#x} out of bounds or misaligned")
        return struct.unpack_from("<I", self.mem, off)[0]

    def store_word(self, addr: int, value: int):
        off = addr - self.base
        if off < 0 or off + 4 > len(self.mem) or addr & 3:
            raise MemoryFault(f"store to {addr:#x} out of bounds or misaligned")
        if addr < self.code_end:
            raise MemoryFault(f"store to code at {addr:#x}")
        struct.pack_into("<I", self.mem, off, value & MASK)


def _apply_fault(m: Machine, image: CodeImage, action):
    if isinstance(action, OverwriteReturnSlot):
        if action.frame_addr is None:
            addr = m.regs[2] + action.sp_offset
        else:
            addr = image.address(action.frame_addr)
        # the attacker controls all of data memory: plain store, no code check
        off = addr - m.base
        if off < 0 or off + 4 > len(m.mem):
            raise MemoryFault(f"fault address {addr:#x} out of bounds")
        struct.pack_into("<I", m.mem, off, image.address(action.new_addr) & MASK)
    elif isinstance(action, CorruptRegisterBeforeIndirect):
        if action.reg:
            m.regs[action.reg] = image.address(action.new_addr) & MASK
    else:
        m.pc = image.address(action.new_addr) & MASK


def run(image: CodeImage, monitor: Optional[Monitor] = None, fuel: int = DEFAULT_FUEL,
        faults=(), irq_plan: Optional[IrqPlan] = None, full_trace: bool = False) -> RunStats:
    """Execute ``image`` until ``ecall``, a CFI exception or fuel exhaustion."""
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    m = Machine(image)
    code = _predecode(image)
    injected = image.injected
    base = image.base
    ncode = len(code)
    regs = m.regs
    mem = m.mem
    unpack = struct.unpack_from
    pack = struct.pack_into
    code_end_off = image.code_end - base
    mem_len = len(mem)
    stats = RunStats()

    by_count, by_pc = {}, {}
    for f in faults:
        if f.at_retired_count is not None:
            by_count.setdefault(f.at_retired_count, []).append(f.action)
        else:
            by_pc.setdefault(image.address(f.at_pc), []).append(f.action)
    irq_at = sorted((irq_plan.assert_at if irq_plan else ()), reverse=True)
    pending = []                  # assertion counts not yet serviced
    in_handler = False
    on_event = monitor.on_event if monitor is not None else None

    pc = m.pc
    retired = 0
    cfi_retired = 0
    n_direct = n_indirect = 0

    def verdict_stop(v, at):
        stats.verdict = CfiException(v, at, retired)

    while True:
        # interrupt boundary
        if irq_at or pending:
            while irq_at and irq_at[-1] <= retired:
                pending.append(irq_at.pop())
            if pending and not in_handler and not (monitor is not None and monitor.interrupts_masked()):
                asserted = pending.pop(0)
                defer = retired - asserted
                stats.irq_log.append((asserted, retired, pc,
                                      bool(monitor is not None and monitor.expecting)))
                stats.irqs_serviced += 1
                stats.irq_max_defer_cycles = max(stats.irq_max_defer_cycles, defer)
                m.mepc = pc
                pc = image.irq_handler
                in_handler = True
        if by_count and retired in by_count:
            m.pc = pc
            for act in by_count.pop(retired):
                _apply_fault(m, image, act)
            pc = m.pc
        if by_pc and pc in by_pc:
            m.pc = pc
            for act in by_pc.pop(pc):
                _apply_fault(m, image, act)
            pc = m.pc

        if retired >= fuel:
            raise FuelExhausted(f"fuel of {fuel} instructions exhausted at pc {pc:#x}")
        idx = (pc - base) >> 2
        if pc & 3 or not 0 <= idx < ncode:
            raise MemoryFault(f"instruction fetch from {pc:#x}")
        mn, rd, rs1, rs2, imm, ev, payload = code[idx]
        nxt = pc + 4
        event = None

        if mn == "addi":
            if rd:
                regs[rd] = (regs[rs1] + imm) & MASK
        elif mn == "lw":
            addr = (regs[rs1] + imm) & MASK
            off = addr - base
            if off < 0 or off + 4 > mem_len or addr & 3:
                raise MemoryFault(f"load of {addr:#x} at pc {pc:#x}")
            if rd:
                regs[rd] = unpack("<I", mem, off)[0]
        elif mn == "sw":
            addr = (regs[rs1] + imm) & MASK
            off = addr - base
            if off < code_end_off or off + 4 > mem_len or addr & 3:
                raise MemoryFault(f"store to {addr:#x} at pc {pc:#x}")
            pack("<I", mem, off, regs[rs2])
        elif ev is not None:
            if ev is CFI:
                event = CfiEvent(CFI, pc, mnemonic=mn, payload=payload, ra=regs[1])
            elif mn == "jal":
                target = (pc + imm) & MASK
                if rd:
                    regs[rd] = nxt
                event = CfiEvent(DIRECT_CALL, pc, target, nxt)
                nxt = target
                n_direct += 1
            else:
                target = (regs[rs1] + imm) & ~1 & MASK
                if rd:
                    regs[rd] = nxt
                event = CfiEvent(ev, pc, target, nxt if ev is INDIRECT_CALL else 0)
                nxt = target
                if ev is INDIRECT_CALL:
                    n_indirect += 1
        elif mn[0] == "b":
            a, b = regs[rs1], regs[rs2]
            if mn == "beq":
                taken = a == b
            elif mn == "bne":
                taken = a != b
            elif mn == "blt":
                taken = _s32(a) < _s32(b)
            elif mn == "bge":
                taken = _s32(a) >= _s32(b)
            elif mn == "bltu":
                taken = a < b
            else:
                taken = a >= b
            if taken:
                nxt = (pc + imm) & MASK
        elif mn == "jal":
            if rd:
                regs[rd] = nxt
            nxt = (pc + imm) & MASK
        elif mn == "ecall":
            retired += 1
            if injected[idx]:
                cfi_retired += 1
            if on_event is not None and full_trace:
                v = on_event(CfiEvent(RETIRE, pc))
                if v is not OK:
                    verdict_stop(v, pc)
                    break
            r0, n = image.result
            words = tuple(unpack("<I", mem, r0 - base + 4 * k)[0] for k in range(n))
            stats.verdict = Completed((regs[10], words))
            break
        elif mn == "mret":
            nxt = m.mepc
            in_handler = False
        else:
            _alu(mn, rd, rs1, rs2, imm, regs, pc, m)

        retired += 1
        if injected[idx]:
            cfi_retired += 1
        if on_event is not None:
            if event is not None:
                v = on_event(event)
            elif full_trace or monitor.expecting:
                v = on_event(CfiEvent(RETIRE, pc))
            else:
                v = OK
            if v is not OK:
                verdict_stop(v, pc)
                break
        pc = nxt

    stats.retired_total = retired
    stats.retired_cfi = cfi_retired
    stats.calls_direct = n_direct
    stats.calls_indirect = n_indirect
    return stats


def _alu(mn, rd, rs1, rs2, imm, regs, pc, m: Machine):
    a = regs[rs1]
    if mn in ("lb", "lh", "lbu", "lhu"):
        addr = (a + imm) & MASK
        size = 1 if mn in ("lb", "lbu") else 2
        off = addr - m.base
        if off < 0 or off + size > len(m.mem) or addr % size:
            raise MemoryFault(f"load of {addr:#x} at pc {pc:#x}")
        v = int.from_bytes(m.mem[off:off + size], "little")
        if mn in ("lb", "lh") and v >> (8 * size - 1):
            v -= 1 << (8 * size)
        if rd:
            regs[rd] = v & MASK
        return
    if mn in ("sb", "sh"):
        addr = (a + imm) & MASK
        size = 1 if mn == "sb" else 2
        off = addr - m.base
        if off < m.code_end - m.base or off + size > len(m.mem) or addr % size:
            raise MemoryFault(f"store to {addr:#x} at pc {pc:#x}")
        m.mem[off:off + size] = (regs[rs2] & ((1 << (8 * size)) - 1)).to_bytes(size, "little")
        return
    if mn == "ebreak":
        raise SimError(f"ebreak at {pc:#x}")
    b = regs[rs2]
    if mn == "lui":
        v = imm << 12
    elif mn == "auipc":
        v = pc + (imm << 12)
    elif mn == "slti":
        v = int(_s32(a) < imm)
    elif mn == "sltiu":
        v = int(a < (imm & MASK))
    elif mn == "xori":
        v = a ^ imm
    elif mn == "ori":
        v = a | imm
    elif mn == "andi":
        v = a & imm
    elif mn == "slli":
        v = a << imm
    elif mn == "srli":
        v = a >> imm
    elif mn == "srai":
        v = _s32(a) >> imm
    elif mn == "add":
        v = a + b
    elif mn == "sub":
        v = a - b
    elif mn == "sll":
        v = a << (b & 31)
    elif mn == "slt":
        v = int(_s32(a) < _s32(b))
    elif mn == "sltu":
        v = int(a < b)
    elif mn == "xor":
        v = a ^ b
    elif mn == "srl":
        v = a >> (b & 31)
    elif mn == "sra":
        v = _s32(a) >> (b & 31)
    elif mn == "or":
        v = a | b
    elif mn == "and":
        v = a & b
    elif mn == "mul":
        v = a * b
    elif mn == "mulh":
        v = (_s32(a) * _s32(b)) >> 32
    elif mn == "mulhsu":
        v = (_s32(a) * b) >> 32
    elif mn == "mulhu":
        v = (a * b) >> 32
    elif mn == "div":
        sa, sb = _s32(a), _s32(b)
        if sb == 0:
            v = -1
        elif sa == -(1 << 31) and sb == -1:
            v = sa
        else:
            v = abs(sa) // abs(sb) * (1 if (sa < 0) == (sb < 0) else -1)
    elif mn == "divu":
        v = a // b if b else MASK
    elif mn == "rem":
        sa, sb = _s32(a), _s32(b)
        if sb == 0:
            v = sa
        elif sa == -(1 << 31) and sb == -1:
            v = 0
        else:
            v = sa - sb * (abs(sa) // abs(sb) * (1 if (sa < 0) == (sb < 0) else -1))
    elif mn == "remu":
        v = a % b if b else a
    else:
        raise SimError(f"unsupported instruction {mn} at {pc:#x}")
    if rd:
        regs[rd] = v & MASK
