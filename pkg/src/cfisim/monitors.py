"""The six CFI enforcement state machines behind one event interface.

The simulator hands every retired control transfer and CFI instruction to
``Monitor.on_event`` and gets a :class:`Verdict` back.  Ordinary retires
only matter while a monitor waits for a specific next instruction; the
simulator forwards them whenever ``monitor.expecting`` is set.
"""
from __future__ import annotations

import enum
import math
from typing import NamedTuple, Optional

import numpy as np

from .config import EntryBits, MonitorConfig, Scheme


class Verdict(enum.Enum):
    OK = "Ok"
    STACK_FULL = "StackFull"
    STACK_EMPTY = "StackEmpty"
    RETURN_MISMATCH = "ReturnMismatch"
    LABEL_MISMATCH = "LabelMismatch"
    INVALID_FLOW = "InvalidFlow"
    POLICY_DENIED = "PolicyDenied"
    INACTIVE_TARGET = "InactiveTarget"
    RECURSION_EXCEEDED = "RecursionExceeded"
    SETJMP_SLOT_INVALID = "SetjmpSlotInvalid"


OK = Verdict.OK


class EventKind(enum.Enum):
    DIRECT_CALL = "DirectCall"
    INDIRECT_CALL = "IndirectCall"
    RETURN = "Return"
    INDIRECT_JUMP = "IndirectJump"
    CFI = "Cfi"
    RETIRE = "Retire"


DIRECT_CALL = EventKind.DIRECT_CALL
INDIRECT_CALL = EventKind.INDIRECT_CALL
RETURN = EventKind.RETURN
INDIRECT_JUMP = EventKind.INDIRECT_JUMP
CFI = EventKind.CFI
RETIRE = EventKind.RETIRE


class CfiEvent(NamedTuple):
    """One retired instruction as seen by a monitor.

    ``target`` is the transfer destination, ``return_addr`` the link value of
    a call, ``ra`` the value of the return-address register when a CFI
    instruction retires (used by the instruction-driven shadow stacks).
    """

    kind: EventKind
    pc: int
    target: int = 0
    return_addr: int = 0
    mnemonic: Optional[str] = None
    payload: int = 0
    ra: int = 0


def cfi_event(mnemonic: str, payload: int = 0, pc: int = 0, ra: int = 0) -> CfiEvent:
    return CfiEvent(CFI, pc, mnemonic=mnemonic, payload=payload, ra=ra)


class MonitorError(Exception):
    """Event delivered to a monitor that already raised a CFI exception."""


# --------------------------------
# Storage elements
# --------------------------------

class ShadowStack:
    """Bounded LIFO of (stored value, recursion counter) entries.

    ``entry_bits`` of 18 keeps address bits [18:1]; 32 keeps the full
    address; any other width masks raw labels.  ``recursion_depth`` enables
    per-entry counters: a push matching the top entry bumps its counter
    instead of taking a new slot, saturating at ``recursion_depth - 1``.
    """

    def __init__(self, size: int, entry_bits: int = 32, recursion_depth: Optional[int] = None,
                 address_mode: bool = True):
        self.size = size
        self.entry_bits = entry_bits
        self.recursion_depth = recursion_depth
        self.address_mode = address_mode
        self.stored = []
        self.counters = []

    def mask(self, value: int) -> int:
        if self.address_mode and self.entry_bits == 18:
            return (value >> 1) & 0x3FFFF
        return value & ((1 << self.entry_bits) - 1)

    @property
    def sp(self) -> int:
        return len(self.stored)

    def top(self):
        return (self.stored[-1], self.counters[-1]) if self.stored else None

    def push(self, value: int) -> Verdict:
        m = self.mask(value)
        if self.recursion_depth is not None and self.stored and self.stored[-1] == m:
            if self.counters[-1] >= self.recursion_depth - 1:
                return Verdict.RECURSION_EXCEEDED
            self.counters[-1] += 1
            return OK
        if len(self.stored) >= self.size:
            return Verdict.STACK_FULL
        self.stored.append(m)
        self.counters.append(0)
        return OK

    def pop_check(self, value: int) -> Verdict:
        if not self.stored:
            return Verdict.STACK_EMPTY
        if self.stored[-1] != self.mask(value):
            return Verdict.RETURN_MISMATCH
        if self.counters[-1]:
            self.counters[-1] -= 1
        else:
            self.stored.pop()
            self.counters.pop()
        return OK

    def snapshot(self):
        return (self.sp, self.counters[-1] if self.counters else 0)

    def unwind(self, snap) -> None:
        sp, counter = snap
        del self.stored[sp:]
        del self.counters[sp:]
        if self.counters:
            self.counters[-1] = counter

    def clear(self):
        self.stored.clear()
        self.counters.clear()


class ActiveSet:
    """One activity bit per function label plus a single recursion counter."""

    def __init__(self, num_functions: int, recursion_depth: int):
        self.active = np.zeros(num_functions, dtype=bool)
        self.recursion_depth = recursion_depth
        self.depth_counter = 0

    def valid(self, label: int) -> bool:
        return 0 <= label < len(self.active)


class PolicyMatrix:
    """Allowed (indirect call site, target) pairs plus the address decoder.

    The decoder maps an 18-bit address tag (bits [18:1]) to a column index.
    """

    def __init__(self, calls: int, called: int, tag_bits: int = 18):
        self.flags = np.zeros((calls, called), dtype=bool)
        self.decoder = {}
        self.tag_bits = tag_bits

    def tag(self, addr: int) -> int:
        return (addr >> 1) & ((1 << self.tag_bits) - 1)

    def add_target(self, addr: int, index: int):
        t = self.tag(addr)
        if t in self.decoder and self.decoder[t] != index:
            raise ValueError(f"decoder tag {t:#x} already maps to {self.decoder[t]}")
        if not 0 <= index < self.flags.shape[1]:
            raise ValueError(f"target index {index} exceeds INDIRECTLY_CALLED")
        self.decoder[t] = index

    def allow(self, site: int, index: int):
        self.flags[site, index] = True

    def lookup(self, site: int, addr: int) -> bool:
        idx = self.decoder.get(self.tag(addr))
        if idx is None or not 0 <= site < self.flags.shape[0]:
            return False
        return bool(self.flags[site, idx])


# --------------------------------
# Monitors
# --------------------------------

class Fsm(enum.Enum):
    IDLE = "Idle"
    EXPECT_CHECK_AFTER_CALL = "ExpectCheckAfterCall"
    EXPECT_CHECK_AFTER_JUMP = "ExpectCheckAfterJump"


class Monitor:
    scheme: Scheme
    protects_interrupts = False

    def __init__(self, cfg: Optional[MonitorConfig] = None, init=None):
        self.cfg = cfg or MonitorConfig()
        self.init = init
        self.reset()

    def reset(self):
        """State after CFI_RESET: everything cleared, protection disabled."""
        self.enabled = False
        self.expecting = False
        self.failed: Optional[Verdict] = None
        self._reset()

    def _reset(self):
        pass

    def on_event(self, ev: CfiEvent) -> Verdict:
        if self.failed is not None:
            raise MonitorError(f"monitor already raised {self.failed.value}")
        if not self.enabled:
            if ev.kind is CFI and ev.mnemonic == "cfi_enable":
                self.enabled = True
            return OK
        if ev.kind is CFI:
            m = ev.mnemonic
            if m == "cfi_reset":
                self.reset()
                return OK
            if m == "cfi_enable":
                return self._fail(Verdict.INVALID_FLOW) if self.expecting else OK
            if m == "cfi_disable":
                if self.expecting:
                    return self._fail(Verdict.INVALID_FLOW)
                self.enabled = False
                return OK
        v = self._step(ev)
        if v is not OK:
            return self._fail(v)
        return OK

    def _fail(self, v: Verdict) -> Verdict:
        self.failed = v
        return v

    def _step(self, ev: CfiEvent) -> Verdict:
        raise NotImplementedError

    def interrupts_masked(self) -> bool:
        return self.protects_interrupts and self.enabled and self.expecting


class _SetjmpMixin:
    """CFI_SETJMP / CFI_LONGJMP slot handling shared by EXCEC and HCFI."""

    def _reset_setjmp(self):
        self.slots = [None] * self.cfg.setjmp_calls
        self.longjmp_pending = False

    def _setjmp(self, slot: int) -> Verdict:
        if not 0 <= slot < len(self.slots):
            return Verdict.SETJMP_SLOT_INVALID
        if self.longjmp_pending:
            if self.slots[slot] is None:
                return Verdict.SETJMP_SLOT_INVALID
            self.stack.unwind(self.slots[slot])
            self.longjmp_pending = False
        else:
            self.slots[slot] = self.stack.snapshot()
        return OK


class ExcecMonitor(_SetjmpMixin, Monitor):
    """Label pairs for forward edges, hardware shadow stack on JAL/JALR/RET."""

    scheme = Scheme.EXCEC
    protects_interrupts = True

    def _reset(self):
        cfg = self.cfg
        bits = 18 if cfg.entry_bits(self.scheme) is EntryBits.BITS18TO1 else 32
        depth = cfg.recursion_depth if cfg.recursion_counters else None
        self.stack = ShadowStack(cfg.shadow_stack_size, bits, depth)
        self.fsm = Fsm.IDLE
        self.label = 0
        self.transferred = False
        self.expect_setjmp = False
        self._reset_setjmp()

    def _step(self, ev: CfiEvent) -> Verdict:
        v = self._excec_step(ev)
        self.expecting = self.fsm is not Fsm.IDLE or self.expect_setjmp
        return v

    def _excec_step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        m = ev.mnemonic
        if self.expect_setjmp:
            if k is CFI and m == "cfi_setjmp":
                self.expect_setjmp = False
                return self._setjmp(ev.payload)
            return Verdict.INVALID_FLOW
        if self.fsm is not Fsm.IDLE:
            if not self.transferred:
                if self.fsm is Fsm.EXPECT_CHECK_AFTER_CALL and k is INDIRECT_CALL:
                    self.transferred = True
                    return self.stack.push(ev.return_addr)
                if self.fsm is Fsm.EXPECT_CHECK_AFTER_JUMP and k is INDIRECT_JUMP:
                    self.transferred = True
                    return OK
                return Verdict.INVALID_FLOW
            if k is CFI and m == "cfi_check":
                if ev.payload == 0 or ev.payload != self.label:
                    return Verdict.LABEL_MISMATCH
                self.fsm = Fsm.IDLE
                self.transferred = False
                return OK
            return Verdict.INVALID_FLOW

        if k is DIRECT_CALL:
            return self.stack.push(ev.return_addr)
        if k is RETURN:
            if self.longjmp_pending:
                # the longjmp return: must land on the matching CFI_SETJMP
                self.expect_setjmp = True
                return OK
            return self.stack.pop_check(ev.target)
        if k is INDIRECT_CALL or k is INDIRECT_JUMP:
            return Verdict.INVALID_FLOW
        if k is CFI:
            if m == "cfi_call":
                self.fsm, self.label, self.transferred = Fsm.EXPECT_CHECK_AFTER_CALL, ev.payload, False
            elif m == "cfi_jump":
                self.fsm, self.label, self.transferred = Fsm.EXPECT_CHECK_AFTER_JUMP, ev.payload, False
            elif m == "cfi_check":
                # only valid right after a guarded transfer
                return Verdict.LABEL_MISMATCH if ev.payload == 0 else Verdict.INVALID_FLOW
            elif m == "cfi_setjmp":
                return self._setjmp(ev.payload)
            elif m == "cfi_longjmp":
                self.longjmp_pending = True
        return OK


class CetMonitor(Monitor):
    """Coarse IBT: every indirect transfer must land on ENDBR; native shadow stack."""

    scheme = Scheme.CET
    protects_interrupts = True

    def _reset(self):
        bits = 18 if self.cfg.entry_bits(self.scheme) is EntryBits.BITS18TO1 else 32
        self.stack = ShadowStack(self.cfg.shadow_stack_size, bits)

    def _step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        if self.expecting:
            if k is CFI and ev.mnemonic == "endbr":
                self.expecting = False
                return OK
            return Verdict.INVALID_FLOW
        if k is DIRECT_CALL:
            return self.stack.push(ev.return_addr)
        if k is INDIRECT_CALL:
            self.expecting = True
            return self.stack.push(ev.return_addr)
        if k is INDIRECT_JUMP:
            self.expecting = True
            return OK
        if k is RETURN:
            return self.stack.pop_check(ev.target)
        return OK


class FixerMonitor(Monitor):
    """Policy matrix for indirect calls, instruction-driven shadow stack."""

    scheme = Scheme.FIXER

    def _reset(self):
        cfg = self.cfg
        bits = 18 if cfg.entry_bits(self.scheme) is EntryBits.BITS18TO1 else 32
        self.stack = ShadowStack(cfg.shadow_stack_size, bits)
        if isinstance(self.init, PolicyMatrix):
            self.matrix = self.init
        else:
            self.matrix = PolicyMatrix(cfg.indirect_calls, cfg.indirectly_called,
                                       cfg.decoder_tag_bits)
        self.armed_site = None

    def _step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        if self.armed_site is not None:
            site, self.armed_site = self.armed_site, None
            self.expecting = False
            if k is not INDIRECT_CALL:
                return Verdict.INVALID_FLOW
            if not self.matrix.lookup(site, ev.target):
                return Verdict.POLICY_DENIED
            return OK
        if k is INDIRECT_CALL:
            return Verdict.INVALID_FLOW
        if k is CFI:
            m = ev.mnemonic
            if m == "fx_push":
                return self.stack.push(ev.pc + 4 * ev.payload)
            if m == "fx_ret":
                return self.stack.pop_check(ev.ra)
            if m == "fx_policy":
                self.armed_site = ev.payload
                self.expecting = True
        return OK


class HafixMonitor(Monitor):
    """Active Set: returns must land on a check naming an active function."""

    scheme = Scheme.HAFIX

    def _reset(self):
        self.active_set = ActiveSet(self.cfg.num_functions, self.cfg.recursion_depth)

    def _step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        aset = self.active_set
        if self.expecting:
            if k is CFI and ev.mnemonic == "hafix_check":
                self.expecting = False
                if not aset.valid(ev.payload) or not aset.active[ev.payload]:
                    return Verdict.INACTIVE_TARGET
                return OK
            return Verdict.INVALID_FLOW
        if k is RETURN:
            self.expecting = True
            return OK
        if k is not CFI:
            return OK
        m = ev.mnemonic
        label = ev.payload
        if m.startswith("hafix_") and not aset.valid(label):
            return Verdict.INACTIVE_TARGET
        if m == "hafix_act":
            aset.active[label] = True
        elif m == "hafix_act_rec":
            if aset.active[label]:
                if aset.depth_counter >= aset.recursion_depth - 1:
                    return Verdict.RECURSION_EXCEEDED
                aset.depth_counter += 1
            else:
                aset.active[label] = True
        elif m == "hafix_deact":
            aset.active[label] = False
        elif m == "hafix_deact_rec":
            if aset.depth_counter:
                aset.depth_counter -= 1
            else:
                aset.active[label] = False
        elif m == "hafix_check":
            if not aset.active[label]:
                return Verdict.INACTIVE_TARGET
        return OK


class HcfiMonitor(_SetjmpMixin, Monitor):
    """Caller label set / callee label check, instruction-driven shadow stack."""

    scheme = Scheme.HCFI

    def _reset(self):
        cfg = self.cfg
        bits = 18 if cfg.entry_bits(self.scheme) is EntryBits.BITS18TO1 else 32
        depth = cfg.recursion_depth if cfg.recursion_counters else None
        self.stack = ShadowStack(cfg.shadow_stack_size, bits, depth)
        self.label = None
        self.transferred = False
        self._reset_setjmp()

    def _step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        m = ev.mnemonic
        if self.label is not None:
            if not self.transferred:
                if k is INDIRECT_CALL:
                    self.transferred = True
                    return OK
                return Verdict.INVALID_FLOW
            if k is CFI and m == "hcfi_check":
                if ev.payload != self.label:
                    return Verdict.LABEL_MISMATCH
                self.label, self.transferred, self.expecting = None, False, False
                return OK
            return Verdict.INVALID_FLOW
        if k is INDIRECT_CALL:
            return Verdict.INVALID_FLOW
        if k is not CFI:
            return OK
        if m == "hcfi_push":
            return self.stack.push(ev.pc + 4 * ev.payload)
        if m == "hcfi_pop":
            if self.longjmp_pending:
                return OK
            return self.stack.pop_check(ev.ra)
        if m == "hcfi_set":
            self.label, self.transferred, self.expecting = ev.payload, False, True
        elif m == "cfi_setjmp":
            return self._setjmp(ev.payload)
        elif m == "cfi_longjmp":
            self.longjmp_pending = True
        return OK


class HecfiMonitor(Monitor):
    """Label pairs (with trampolines) forward; label shadow stack popped at the return point."""

    scheme = Scheme.HECFI

    def _reset(self):
        cfg = self.cfg
        self.stack = ShadowStack(cfg.shadow_stack_size, cfg.function_label_bits,
                                 address_mode=False)
        self.fsm = Fsm.IDLE
        self.label = 0
        self.transferred = False
        self.expect_pop = False

    def _step(self, ev: CfiEvent) -> Verdict:
        v = self._hecfi_step(ev)
        self.expecting = self.fsm is not Fsm.IDLE or self.expect_pop
        return v

    def _hecfi_step(self, ev: CfiEvent) -> Verdict:
        k = ev.kind
        m = ev.mnemonic
        if self.expect_pop:
            self.expect_pop = False
            if k is CFI and m == "hecfi_pop":
                return self.stack.pop_check(ev.payload)
            return Verdict.INVALID_FLOW
        if self.fsm is not Fsm.IDLE:
            if not self.transferred:
                if (self.fsm is Fsm.EXPECT_CHECK_AFTER_CALL and k is INDIRECT_CALL) or \
                        (self.fsm is Fsm.EXPECT_CHECK_AFTER_JUMP and k is INDIRECT_JUMP):
                    self.transferred = True
                    return OK
                return Verdict.INVALID_FLOW
            if k is CFI and m == "cfi_check":
                if ev.payload == 0 or ev.payload != self.label:
                    return Verdict.LABEL_MISMATCH
                self.fsm, self.transferred = Fsm.IDLE, False
                return OK
            return Verdict.INVALID_FLOW
        if k is RETURN:
            self.expect_pop = True
            return OK
        if k is INDIRECT_CALL or k is INDIRECT_JUMP:
            return Verdict.INVALID_FLOW
        if k is CFI:
            if m == "hecfi_push":
                return self.stack.push(ev.payload)
            if m == "hecfi_pop":
                return Verdict.INVALID_FLOW
            if m == "cfi_call":
                self.fsm, self.label, self.transferred = Fsm.EXPECT_CHECK_AFTER_CALL, ev.payload, False
            elif m == "cfi_jump":
                self.fsm, self.label, self.transferred = Fsm.EXPECT_CHECK_AFTER_JUMP, ev.payload, False
            elif m == "cfi_check":
                return Verdict.LABEL_MISMATCH if ev.payload == 0 else Verdict.INVALID_FLOW
        return OK


MONITORS = {
    Scheme.FIXER: FixerMonitor,
    Scheme.HAFIX: HafixMonitor,
    Scheme.HCFI: HcfiMonitor,
    Scheme.HECFI: HecfiMonitor,
    Scheme.CET: CetMonitor,
    Scheme.EXCEC: ExcecMonitor,
}


def monitor_new(scheme, cfg: Optional[MonitorConfig] = None, init=None) -> Monitor:
    """Fresh monitor in post-CFI_RESET state (disabled until CFI_ENABLE)."""
    return MONITORS[Scheme(scheme)](cfg, init)


def interrupts_masked(monitor: Optional[Monitor]) -> bool:
    return monitor is not None and monitor.interrupts_masked()


# --------------------------------
# FIXER initialisation data (mon-v1)
# --------------------------------

MON_SCHEMA = "mon-v1"


def fixer_policy(program, image, cfg: Optional[MonitorConfig] = None) -> PolicyMatrix:
    """Build the policy matrix and decoder from the sidecar and layout."""
    cfg = cfg or MonitorConfig()
    pm = PolicyMatrix(cfg.indirect_calls, cfg.indirectly_called, cfg.decoder_tag_bits)
    columns = {}
    for site, cs in enumerate(program.cfg.indirect_call_sites):
        for t in cs.targets:
            if t not in columns:
                columns[t] = len(columns)
                pm.add_target(image.symbols[t], columns[t])
            pm.allow(site, columns[t])
    return pm


def write_init(pm: PolicyMatrix) -> str:
    lines = [f"{MON_SCHEMA} fixer {pm.flags.shape[0]} {pm.flags.shape[1]} {pm.tag_bits}"]
    for tag, idx in sorted(pm.decoder.items(), key=lambda kv: kv[1]):
        lines.append(f"decoder {idx} {tag:#07x}")
    for site, idx in zip(*np.nonzero(pm.flags)):
        lines.append(f"allow {site} {idx}")
    return "\n".join(lines) + "\n"


def read_init(text: str) -> PolicyMatrix:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0][:2] != [MON_SCHEMA, "fixer"]:
        raise ValueError(f"not a {MON_SCHEMA} fixer table")
    calls, called, bits = (int(x) for x in rows[0][2:5])
    pm = PolicyMatrix(calls, called, bits)
    for row in rows[1:]:
        if row[0] == "decoder":
            idx, tag = int(row[1]), int(row[2], 0)
            if tag in pm.decoder:
                raise ValueError(f"duplicate decoder tag {tag:#x}")
            pm.decoder[tag] = idx
        elif row[0] == "allow":
            pm.allow(int(row[1]), int(row[2]))
        else:
            raise ValueError(f"unknown {MON_SCHEMA} record {row[0]!r}")
    return pm


# --------------------------------
# Flip-flop cost model
# --------------------------------

def _bits(n: int) -> int:
    return max(1, math.ceil(math.log2(n + 1)))


def ff_cost(scheme, cfg: Optional[MonitorConfig] = None) -> dict:
    """Flip-flops per monitor memory element, plus ``total``.

    Purely structural: every term is a product of the configured
    dimensions.  LUTs are not modelled.
    """
    cfg = cfg or MonitorConfig()
    scheme = Scheme(scheme)
    size = cfg.shadow_stack_size
    entry = 18 if cfg.entry_bits(scheme) is EntryBits.BITS18TO1 else 32
    sp_bits = _bits(size)
    label_bits = _bits(cfg.indirect_calls + cfg.indirect_jumps + cfg.indirectly_called)
    slot_bits = cfg.setjmp_calls * (sp_bits + cfg.counter_bits)
    c = {}
    if scheme is Scheme.FIXER:
        c["policy_matrix"] = cfg.indirect_calls * cfg.indirectly_called
        c["address_decoder"] = cfg.indirectly_called * cfg.decoder_tag_bits
        c["shadow_stack"] = size * entry
        c["stack_pointer"] = sp_bits
        c["armed_site"] = _bits(cfg.indirect_calls - 1) + 1
    elif scheme is Scheme.HAFIX:
        c["active_set"] = cfg.num_functions
        c["recursion_counter"] = cfg.counter_bits
        c["fsm"] = 1
    elif scheme is Scheme.HCFI:
        c["shadow_stack"] = size * entry
        if cfg.recursion_counters:
            c["recursion_counters"] = size * cfg.counter_bits
        c["stack_pointer"] = sp_bits
        c["label_register"] = label_bits
        c["setjmp_slots"] = slot_bits
        c["fsm"] = 3
    elif scheme is Scheme.HECFI:
        c["shadow_stack"] = size * cfg.function_label_bits
        c["stack_pointer"] = sp_bits
        c["label_register"] = label_bits
        c["fsm"] = 3
    elif scheme is Scheme.CET:
        c["shadow_stack"] = size * entry
        c["stack_pointer"] = sp_bits
        c["fsm"] = 1
    else:
        c["shadow_stack"] = size * entry
        if cfg.recursion_counters:
            c["recursion_counters"] = size * cfg.counter_bits
        c["stack_pointer"] = sp_bits
        c["label_register"] = label_bits
        c["setjmp_slots"] = slot_bits
        c["fsm"] = 4        # state, transferred, enabled, longjmp pending
    c["total"] = sum(c.values())
    return c


def build_init(scheme, program, image, cfg: Optional[MonitorConfig] = None):
    """Scheme initialisation data for ``monitor_new``; only FIXER needs any."""
    if Scheme(scheme) is Scheme.FIXER:
        return fixer_policy(program, image, cfg)
    return None
