"""Program container, CFG sidecar (``cfg-v1``) and flat code-image layout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .asm import INJECTED_TAG, AsmError, DataWord, Source, parse, resolve
from .isa import ControlFlowClass, Instruction, IsaError, classify, encode, format_instruction

DEFAULT_BASE = 0x1C000000
DEFAULT_MEM_SIZE = 512 * 1024
CFG_SCHEMA = "cfg-v1"
ENTRY_FUNCTION = "main"

# Platform code shared by every build (baseline included) and excluded from
# code-size accounting: a startup stub that brackets main with CFI_ENABLE /
# CFI_RESET, and a register-preserving interrupt handler.
CRT0 = """
_start:
    cfi_enable
    jal ra, main
    cfi_reset
    ecall
"""
IRQ_HANDLER = """
_irq:
    addi sp, sp, -8
    sw t0, 0(sp)
    sw t1, 4(sp)
    la t0, _irq_count
    lw t1, 0(t0)
    addi t1, t1, 1
    sw t1, 0(t0)
    lw t1, 4(sp)
    lw t0, 0(sp)
    addi sp, sp, 8
    mret
"""
PLATFORM_SYMBOLS = ("_start", "_irq", "_irq_count")


class ProgramError(Exception):
    """Malformed program, dangling sidecar reference or layout failure."""


@dataclass
class Function:
    name: str
    body: list                                   # list[Instruction]
    labels: dict = field(default_factory=dict)   # label -> instruction index
    injected: frozenset = frozenset()            # indices added by instrumentation
    is_indirect_target: bool = False
    label_id: Optional[int] = None
    trampoline: bool = False

    def __len__(self):
        return len(self.body)


@dataclass(frozen=True)
class CallSite:
    function: str
    instr_index: int
    targets: tuple          # function names, sidecar order
    site_label: int


@dataclass(frozen=True)
class JumpSite:
    function: str
    instr_index: int
    targets: tuple          # instruction indices inside ``function``


@dataclass(frozen=True)
class SetjmpSite:
    function: str
    instr_index: int
    slot_index: int


@dataclass(frozen=True)
class LongjmpSite:
    function: str
    instr_index: int


@dataclass(frozen=True)
class CfgInfo:
    indirect_call_sites: tuple = ()
    indirect_jump_sites: tuple = ()
    setjmp_sites: tuple = ()
    longjmp_sites: tuple = ()

    @property
    def indirect_targets(self) -> set:
        return {t for s in self.indirect_call_sites for t in s.targets}


@dataclass
class Program:
    functions: list                                  # list[Function]
    cfg: CfgInfo = field(default_factory=CfgInfo)
    data: list = field(default_factory=list)         # list[DataWord]
    data_labels: dict = field(default_factory=dict)
    base_address: int = DEFAULT_BASE
    scheme: Optional[str] = None                     # set once instrumented
    ledger: dict = field(default_factory=dict)       # injected counts by category

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def entry_offset(self, name: str) -> int:
        off = 0
        for f in self.functions:
            if f.name == name:
                return off
            off += 4 * len(f.body)
        raise KeyError(name)

    @property
    def instruction_count(self) -> int:
        return sum(len(f.body) for f in self.functions)

    @property
    def is_instrumented(self) -> bool:
        return self.scheme is not None or any(
            i.is_cfi for f in self.functions for i in f.body)


def code_size(p: Program) -> int:
    """Bytes of program text; platform stubs are not counted."""
    return 4 * p.instruction_count


# --------------------------------
# Loading
# --------------------------------

def _is_returnless_end(f: Function) -> bool:
    if not f.body:
        return False
    last = f.body[-1]
    if f.trampoline:
        return last.mnemonic == "cfi_check" and last.payload == 0
    return classify(last) in (ControlFlowClass.RETURN, ControlFlowClass.DIRECT_JUMP,
                              ControlFlowClass.INDIRECT_JUMP) or last.mnemonic == "ecall"


def validate(p: Program):
    names = [f.name for f in p.functions]
    if len(set(names)) != len(names):
        raise ProgramError("duplicate function names")
    if ENTRY_FUNCTION not in names:
        raise ProgramError(f"program has no {ENTRY_FUNCTION!r} function")
    symbols = set(names) | set(p.data_labels)
    for f in p.functions:
        symbols.update(f.labels)
    for s in PLATFORM_SYMBOLS:
        if s in symbols:
            raise ProgramError(f"{s!r} is reserved for platform code")
    for f in p.functions:
        if not _is_returnless_end(f):
            raise ProgramError(f"function {f.name!r} does not end with a return or jump")
        for i in f.body:
            if i.sym is not None and i.sym not in symbols:
                raise ProgramError(f"undefined symbol {i.sym!r} in {f.name}")
    for w in p.data:
        if w.sym is not None and w.sym not in symbols:
            raise ProgramError(f"undefined symbol {w.sym!r} in .data")
    _validate_cfg(p)


def _site_instr(p: Program, fname: str, index: int, what: str) -> Instruction:
    try:
        f = p.function(fname)
    except KeyError:
        raise ProgramError(f"{what}: dangling reference to function {fname!r}") from None
    if not 0 <= index < len(f.body):
        raise ProgramError(f"{what}: instruction index {index} outside {fname!r}")
    return f.body[index]


def _validate_cfg(p: Program):
    cfg = p.cfg
    labels = [s.site_label for s in cfg.indirect_call_sites]
    if len(set(labels)) != len(labels):
        raise ProgramError("site_label values must be unique")
    if any(lbl <= 0 for lbl in labels):
        raise ProgramError("site_label 0 is reserved")
    names = {f.name for f in p.functions}
    for s in cfg.indirect_call_sites:
        ins = _site_instr(p, s.function, s.instr_index, "indirect call site")
        if classify(ins) is not ControlFlowClass.INDIRECT_CALL:
            raise ProgramError(f"indirect call site {s.function}[{s.instr_index}] is {ins}")
        if not s.targets:
            raise ProgramError(f"indirect call site {s.function}[{s.instr_index}] has no targets")
        for t in s.targets:
            if t not in names:
                raise ProgramError(f"indirect call site: dangling reference to function {t!r}")
    for s in cfg.indirect_jump_sites:
        ins = _site_instr(p, s.function, s.instr_index, "indirect jump site")
        if classify(ins) is not ControlFlowClass.INDIRECT_JUMP:
            raise ProgramError(f"indirect jump site {s.function}[{s.instr_index}] is {ins}")
        n = len(p.function(s.function).body)
        for t in s.targets:
            if not 0 <= t < n:
                raise ProgramError(f"indirect jump target {t} outside {s.function!r}")
    for s in cfg.setjmp_sites + cfg.longjmp_sites:
        ins = _site_instr(p, s.function, s.instr_index, "setjmp/longjmp site")
        if classify(ins) is not ControlFlowClass.DIRECT_CALL:
            raise ProgramError(f"setjmp/longjmp site {s.function}[{s.instr_index}] is {ins}")
    slots = [s.slot_index for s in cfg.setjmp_sites]
    if any(x < 0 for x in slots):
        raise ProgramError("negative setjmp slot")


def _resolve_at(entry: dict, fn, what: str) -> int:
    if "instr_index" in entry:
        return int(entry["instr_index"])
    at = entry.get("at")
    if at is None:
        raise ProgramError(f"malformed sidecar: {what} needs 'at' or 'instr_index'")
    if at not in fn.labels:
        raise ProgramError(f"{what}: dangling reference to label {at!r} in {fn.name!r}")
    return fn.labels[at]


def cfg_from_dict(d: dict, functions) -> CfgInfo:
    """Build CfgInfo from a parsed ``cfg-v1`` tree.

    Sites are addressed by ``function`` plus either ``instr_index`` or ``at``
    (a label on the site instruction).  Jump targets are label names or byte
    offsets from the function entry.
    """
    if not isinstance(d, dict):
        raise ProgramError("malformed sidecar: expected a mapping")
    if d.get("schema", CFG_SCHEMA) != CFG_SCHEMA:
        raise ProgramError(f"malformed sidecar: unsupported schema {d.get('schema')!r}")
    unknown = set(d) - {"schema", "indirect_call_sites", "indirect_jump_sites",
                        "setjmp_sites", "longjmp_sites"}
    if unknown:
        raise ProgramError(f"malformed sidecar: unknown keys {sorted(unknown)}")
    by_name = {f.name: f for f in functions}

    def fn_of(entry, what):
        try:
            name = entry["function"]
        except (KeyError, TypeError):
            raise ProgramError(f"malformed sidecar: {what} lacks 'function'") from None
        if name not in by_name:
            raise ProgramError(f"{what}: dangling reference to function {name!r}")
        return by_name[name]

    calls = []
    for k, e in enumerate(d.get("indirect_call_sites", [])):
        fn = fn_of(e, "indirect call site")
        targets = e.get("targets")
        if not isinstance(targets, list):
            raise ProgramError("malformed sidecar: call site targets must be a list")
        for t in targets:
            if t not in by_name:
                raise ProgramError(f"indirect call site: dangling reference to function {t!r}")
        calls.append(CallSite(fn.name, _resolve_at(e, fn, "indirect call site"),
                              tuple(dict.fromkeys(targets)), int(e.get("site_label", k + 1))))
    jumps = []
    for e in d.get("indirect_jump_sites", []):
        fn = fn_of(e, "indirect jump site")
        idx = []
        for t in e.get("targets", []):
            if isinstance(t, str):
                if t not in fn.labels:
                    raise ProgramError(f"indirect jump site: dangling reference to label {t!r}")
                idx.append(fn.labels[t])
            else:
                if t % 4:
                    raise ProgramError(f"indirect jump target offset {t} not 4-byte aligned")
                idx.append(t // 4)
        jumps.append(JumpSite(fn.name, _resolve_at(e, fn, "indirect jump site"),
                              tuple(dict.fromkeys(idx))))
    setjmps = []
    for e in d.get("setjmp_sites", []):
        fn = fn_of(e, "setjmp site")
        setjmps.append(SetjmpSite(fn.name, _resolve_at(e, fn, "setjmp site"),
                                  int(e.get("slot_index", 0))))
    longjmps = []
    for e in d.get("longjmp_sites", []):
        fn = fn_of(e, "longjmp site")
        longjmps.append(LongjmpSite(fn.name, _resolve_at(e, fn, "longjmp site")))
    return CfgInfo(tuple(calls), tuple(jumps), tuple(setjmps), tuple(longjmps))


def cfg_to_dict(cfg: CfgInfo) -> dict:
    return {
        "schema": CFG_SCHEMA,
        "indirect_call_sites": [
            {"function": s.function, "instr_index": s.instr_index,
             "targets": list(s.targets), "site_label": s.site_label}
            for s in cfg.indirect_call_sites],
        "indirect_jump_sites": [
            {"function": s.function, "instr_index": s.instr_index,
             "targets": [4 * t for t in s.targets]}
            for s in cfg.indirect_jump_sites],
        "setjmp_sites": [
            {"function": s.function, "instr_index": s.instr_index, "slot_index": s.slot_index}
            for s in cfg.setjmp_sites],
        "longjmp_sites": [
            {"function": s.function, "instr_index": s.instr_index}
            for s in cfg.longjmp_sites],
    }


def program_from_source(text: str, cfg=None, base_address: int = DEFAULT_BASE) -> Program:
    src: Source = parse(text, allow_loose=False)
    functions = [Function(sf.name, list(sf.body), dict(sf.labels), frozenset(sf.injected),
                          trampoline=sf.name.startswith("_tr_"))
                 for sf in src.functions]
    cfg_info = cfg_from_dict(cfg, functions) if cfg is not None else CfgInfo()
    targets = cfg_info.indirect_targets
    for f in functions:
        f.is_indirect_target = f.name in targets
    p = Program(functions, cfg_info, list(src.data), dict(src.data_labels), base_address)
    if any(f.injected for f in functions):
        p.scheme = "unknown"
    validate(p)
    return p


def load(asm_path, cfg_path=None, base_address: int = DEFAULT_BASE) -> Program:
    text = Path(asm_path).read_text()
    cfg = None
    if cfg_path is not None:
        try:
            cfg = json.loads(Path(cfg_path).read_text())
        except json.JSONDecodeError as e:
            raise ProgramError(f"malformed sidecar: {e}") from None
    return program_from_source(text, cfg, base_address)


def format_program(p: Program) -> str:
    """Render a Program back to assembly text (round-trips via load)."""
    out = []
    for f in p.functions:
        out.append(f".func {f.name}")
        by_index = {}
        for label, idx in f.labels.items():
            by_index.setdefault(idx, []).append(label)
        for k, ins in enumerate(f.body):
            for label in by_index.get(k, ()):
                out.append(f"{label}:")
            line = "    " + format_instruction(ins)
            if k in f.injected:
                line += "  " + INJECTED_TAG
            out.append(line)
        out.append(".endfunc")
    if p.data or p.data_labels:
        out.append(".data")
        by_index = {}
        for label, idx in p.data_labels.items():
            by_index.setdefault(idx, []).append(label)
        for k, w in enumerate(p.data):
            for label in by_index.get(k, ()):
                out.append(f"{label}:")
            if w.sym is None:
                out.append(f"    .word {w.value:#x}")
            else:
                out.append(f"    .word {w.sym}{w.value:+d}" if w.value else f"    .word {w.sym}")
        for label in by_index.get(len(p.data), ()):
            out.append(f"{label}:")
    return "\n".join(out) + "\n"


# --------------------------------
# Layout
# --------------------------------

@dataclass
class CodeImage:
    base: int
    mem_size: int
    words: list                 # encoded code words, base-relative
    instructions: list          # resolved Instruction per word
    injected: list              # bool per word
    symbols: dict               # name -> absolute address
    functions: dict             # name -> (start, end) absolute addresses
    code_end: int
    data_start: int
    data: list                  # initial data words
    entry: int
    irq_handler: int
    result: tuple = (0, 0)      # (address, word count) of the ``result`` region
    scheme: Optional[str] = None

    @property
    def stack_top(self) -> int:
        return self.base + self.mem_size

    def address(self, ref) -> int:
        """Resolve an int, ``sym`` or ``sym+off`` to an absolute address."""
        if isinstance(ref, int):
            return ref
        ref = ref.replace(" ", "")
        for sep in ("+", "-"):
            if sep in ref[1:]:
                name, off = ref.rsplit(sep, 1)
                return self.symbols[name] + int(off, 0) * (1 if sep == "+" else -1)
        return self.symbols[ref]


def _platform_block(text: str):
    src = parse(text)
    fn = src.functions[0]
    return fn.body, fn.labels


def layout(p: Program, mem_size: int = DEFAULT_MEM_SIZE) -> CodeImage:
    """Place crt0, program functions, interrupt handler, then data."""
    crt0, crt0_labels = _platform_block(CRT0)
    irq, irq_labels = _platform_block(IRQ_HANDLER)

    blocks = [("_start", crt0, crt0_labels, frozenset())]
    blocks += [(f.name, f.body, f.labels, f.injected) for f in p.functions]
    blocks.append(("_irq", irq, irq_labels, frozenset()))

    symbols = {}
    ranges = {}
    addr = p.base_address
    for name, body, labels, _ in blocks:
        symbols[name] = addr
        for label, idx in labels.items():
            symbols[label] = addr + 4 * idx
        ranges[name] = (addr, addr + 4 * len(body))
        addr += 4 * len(body)
    code_end = addr
    data_start = code_end
    data = list(p.data) + [DataWord()]
    data_labels = dict(p.data_labels)
    data_labels["_irq_count"] = len(p.data)
    for label, idx in data_labels.items():
        symbols[label] = data_start + 4 * idx
    total = data_start + 4 * len(data) - p.base_address
    if total + 1024 > mem_size:
        raise ProgramError(f"image of {total} bytes exceeds memory bound of {mem_size} bytes")

    words, resolved, injected = [], [], []
    pc = p.base_address
    for name, body, _, inj in blocks:
        for k, ins in enumerate(body):
            try:
                r = resolve(ins, pc, symbols)
                words.append(encode(r))
            except (AsmError, IsaError) as e:
                raise ProgramError(f"{name}[{k}] {format_instruction(ins)}: {e}") from None
            resolved.append(r)
            injected.append(k in inj)
            pc += 4
    data_words = [(symbols[w.sym] + w.value) & 0xFFFFFFFF if w.sym else w.value for w in data]

    result = (0, 0)
    if "result" in p.data_labels:
        start = p.data_labels["result"]
        later = [i for i in p.data_labels.values() if i > start]
        end = min(later) if later else len(p.data)
        result = (data_start + 4 * start, end - start)

    return CodeImage(p.base_address, mem_size, words, resolved, injected, symbols, ranges,
                     code_end, data_start, data_words, symbols["_start"], symbols["_irq"],
                     result, p.scheme)


def clone(p: Program, **changes) -> Program:
    fns = [replace(f, body=list(f.body), labels=dict(f.labels)) for f in p.functions]
    return replace(p, functions=fns, data=list(p.data), data_labels=dict(p.data_labels),
                   ledger=dict(p.ledger), **changes)


__all__ = [
    "CallSite", "CfgInfo", "CodeImage", "Function", "JumpSite", "LongjmpSite", "Program",
    "ProgramError", "SetjmpSite", "cfg_from_dict", "cfg_to_dict", "code_size", "format_program",
    "layout", "load", "program_from_source", "validate",
]
