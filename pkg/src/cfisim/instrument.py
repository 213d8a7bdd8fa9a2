"""Per-scheme instrumentation passes over a baseline Program.

Every pass expresses its work as instructions inserted before (``pre``) or
after (``post``) original instructions, plus optional trampoline functions.
Labels attached to an original instruction move to the first instruction
inserted before it, so branches and data tables keep reaching the guarded
block.  Inserted instructions are recorded per category in ``Program.ledger``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Optional

import networkx as nx

from .asm import parse_instruction
from .config import MonitorConfig, Scheme
from .isa import ABI_NAMES, PAYLOAD_MAX, ControlFlowClass as CF, cfi, classify
from .program import ENTRY_FUNCTION, CallSite, CfgInfo, Function, JumpSite, Program, clone, validate

TRAMPOLINE_PREFIX = "_tr_"


class InstrumentError(Exception):
    """The program cannot be instrumented for the requested scheme."""


class CapacityError(InstrumentError):
    """Monitor memory too small for the program's sites, targets or functions."""


def _ins(text: str) -> list:
    mnemonic, _, rest = text.strip().partition(" ")
    ops = [t.strip() for t in rest.split(",")] if rest.strip() else []
    return parse_instruction(mnemonic, ops)


# --------------------------------
# Program analysis
# --------------------------------

@dataclass
class _Analysis:
    direct_calls: list      # (function, index, callee)
    returns: list           # (function, index)
    callees: dict           # function -> set of called functions (direct and indirect)


def _analyse(p: Program) -> _Analysis:
    names = {f.name for f in p.functions}
    call_sites = {(s.function, s.instr_index) for s in p.cfg.indirect_call_sites}
    jump_sites = {(s.function, s.instr_index) for s in p.cfg.indirect_jump_sites}
    direct, returns = [], []
    callees = defaultdict(set)
    for f in p.functions:
        for k, ins in enumerate(f.body):
            c = classify(ins)
            if (ins.mnemonic == "jal" or c is CF.COND_BRANCH) and ins.sym is None:
                raise InstrumentError(f"{f.name}[{k}]: pc-relative {ins.mnemonic} without a label "
                                      "cannot be relocated")
            if c is CF.DIRECT_CALL:
                if ins.sym not in names or ins.imm:
                    raise InstrumentError(f"{f.name}[{k}]: call into the middle of a function")
                if ins.sym == ENTRY_FUNCTION:
                    raise InstrumentError(f"{f.name}[{k}]: {ENTRY_FUNCTION} must not be called")
                direct.append((f.name, k, ins.sym))
                callees[f.name].add(ins.sym)
            elif c is CF.DIRECT_JUMP and ins.sym in names:
                raise InstrumentError(f"{f.name}[{k}]: tail call to {ins.sym!r} is not supported")
            elif c is CF.DIRECT_JUMP and ins.sym not in f.labels:
                raise InstrumentError(f"{f.name}[{k}]: jump leaves the function")
            elif c is CF.RETURN:
                returns.append((f.name, k))
            elif c is CF.INDIRECT_CALL and (f.name, k) not in call_sites:
                raise InstrumentError(f"{f.name}[{k}]: indirect call missing from the CFG sidecar")
            elif c is CF.INDIRECT_JUMP and (f.name, k) not in jump_sites:
                raise InstrumentError(f"{f.name}[{k}]: indirect jump missing from the CFG sidecar")
    for s in p.cfg.indirect_call_sites:
        callees[s.function].update(s.targets)
        if ENTRY_FUNCTION in s.targets:
            raise InstrumentError(f"{ENTRY_FUNCTION} must not be an indirect call target")
    return _Analysis(direct, returns, callees)


def recursive_functions(p: Program, a: Optional[_Analysis] = None) -> set:
    """Self-recursive functions; raises on mutual or nested recursion."""
    a = a or _analyse(p)
    names = [f.name for f in p.functions]
    g = nx.DiGraph()
    g.add_nodes_from(names)
    g.add_edges_from((u, v) for u, vs in a.callees.items() for v in vs)
    for comp in nx.strongly_connected_components(g):
        if len(comp) > 1:
            raise InstrumentError("mutual recursion between " + ", ".join(sorted(comp))
                                  + " is not supported")
    rec = {n for n in names if n in a.callees.get(n, ())}
    for r in rec:
        seen, todo = set(), [c for c in a.callees.get(r, ()) if c != r]
        while todo:
            n = todo.pop()
            if n in seen:
                continue
            seen.add(n)
            if n in rec:
                raise InstrumentError(f"nested recursion: recursive {r!r} reaches recursive {n!r}")
            todo.extend(a.callees.get(n, ()))
    return rec


# --------------------------------
# Labels and trampolines
# --------------------------------

@dataclass(frozen=True)
class TrampolineEntry:
    target: str
    target_label: int


@dataclass(frozen=True)
class Trampoline:
    owner_site: int             # index into cfg.indirect_call_sites
    entries: tuple              # TrampolineEntry, sidecar order
    label: int
    name: str
    register: int


@dataclass
class LabelMap:
    """Forward-edge labels chosen for one scheme."""

    site: dict                  # call site index -> label announced by the caller
    target: dict                # function name -> label checked at its entry
    jump: dict                  # jump site index -> label
    trampolined: set            # call site indices routed through a trampoline


def needs_trampoline(cfg: CfgInfo) -> set:
    """Call sites with a target that some other indirect site also reaches."""
    owners = defaultdict(set)
    for k, s in enumerate(cfg.indirect_call_sites):
        for t in s.targets:
            owners[t].add(k)
    return {k for k, s in enumerate(cfg.indirect_call_sites)
            if any(len(owners[t]) > 1 for t in s.targets)}


def label_bits(mcfg: MonitorConfig) -> int:
    n = mcfg.indirect_calls + mcfg.indirect_jumps + mcfg.indirectly_called
    return max(1, n.bit_length())


def assign_labels(cfg: CfgInfo, scheme, mcfg: Optional[MonitorConfig] = None) -> LabelMap:
    """Pick forward-edge labels; 0 is never assigned.

    HCFI shares one label among every site whose target sets overlap
    (transitively), the label of the class being its smallest site label.
    EXCEC/HECFI keep one label per site and route shared targets through
    trampolines; targets reached only via trampolines and jump sites take
    fresh labels above the sidecar's site labels.
    """
    mcfg = mcfg or MonitorConfig()
    scheme = Scheme(scheme)
    sites = cfg.indirect_call_sites
    limit = min(PAYLOAD_MAX, (1 << label_bits(mcfg)) - 1)
    site, target, jump = {}, {}, {}
    tramp = set()
    if scheme is Scheme.HCFI:
        # sites sharing any target collapse into one class (bipartite components)
        g = nx.Graph()
        g.add_nodes_from(range(len(sites)))
        g.add_edges_from((k, ("fn", t)) for k, s in enumerate(sites) for t in s.targets)
        classes = [sorted(k for k in comp if isinstance(k, int))
                   for comp in nx.connected_components(g)]
        for members in classes:
            lbl = min(sites[k].site_label for k in members)
            for k in members:
                site[k] = lbl
                for t in sites[k].targets:
                    target[t] = lbl
    else:
        tramp = needs_trampoline(cfg)
        fresh = max([s.site_label for s in sites], default=0) + 1
        for k, s in enumerate(sites):
            site[k] = s.site_label
            if k not in tramp:
                for t in s.targets:
                    target[t] = s.site_label
        for k in sorted(tramp):
            for t in sites[k].targets:
                if t not in target:
                    target[t] = fresh
                    fresh += 1
        for k, _ in enumerate(cfg.indirect_jump_sites):
            jump[k] = fresh
            fresh += 1
    used = list(site.values()) + list(target.values()) + list(jump.values())
    if used and max(used) > limit:
        raise CapacityError(f"label {max(used)} exceeds the {limit.bit_length()}-bit label space")
    if any(v <= 0 for v in used):
        raise InstrumentError("label 0x0 is reserved")
    return LabelMap(site, target, jump, tramp)


def build_trampoline(site_index: int, site: CallSite, register: int, labels: LabelMap):
    """Dispatch block for one call site: returns (Trampoline, instructions).

    Shape: check the site label, restore the spilled register, compare it
    with each allowed target and branch past that target's entry check, and
    fall into ``cfi_check 0x0`` when nothing matches.
    """
    if not site.targets:
        raise InstrumentError("trampoline needs at least one target")
    reg = ABI_NAMES[register]
    scratch = "t1" if reg == "t0" else "t0"
    label = labels.site[site_index]
    body = [cfi("cfi_check", label)]
    body += _ins(f"lw {reg}, 0(sp)") + _ins("addi sp, sp, 4")
    for t in site.targets:
        body += _ins(f"la {scratch}, {t}") + _ins(f"beq {reg}, {scratch}, {t}+4")
    body.append(cfi("cfi_check", 0))
    entries = tuple(TrampolineEntry(t, labels.target[t]) for t in site.targets)
    name = f"{TRAMPOLINE_PREFIX}{site.function}_{site.instr_index}"
    return Trampoline(site_index, entries, label, name, register), body


# --------------------------------
# Rewriting
# --------------------------------

class _Rewriter:
    def __init__(self, p: Program):
        self.p = p
        self.pre = defaultdict(list)     # (function, index) -> [(Instruction, category)]
        self.post = defaultdict(list)
        self.extra = []                  # (Function, category)

    def before(self, fn: str, idx: int, category: str, *ins, front: bool = False):
        items = [(i, category) for i in ins]
        if front:
            self.pre[fn, idx][:0] = items
        else:
            self.pre[fn, idx].extend(items)

    def after(self, fn: str, idx: int, category: str, *ins):
        self.post[fn, idx].extend((i, category) for i in ins)

    def add_function(self, f: Function, category: str):
        self.extra.append((f, category))

    def build(self, scheme: Scheme, label_ids: Optional[dict] = None) -> Program:
        ledger = defaultdict(int)
        new_fns = []
        at = {}          # (function, old index) -> new index of the original instruction
        start = {}       # (function, old index) -> new index of its guarded block
        for f in self.p.functions:
            body, injected = [], set()
            for k, ins in enumerate(f.body):
                start[f.name, k] = len(body)
                for i, cat in self.pre.get((f.name, k), ()):
                    injected.add(len(body))
                    body.append(i)
                    ledger[cat] += 1
                at[f.name, k] = len(body)
                body.append(ins)
                for i, cat in self.post.get((f.name, k), ()):
                    injected.add(len(body))
                    body.append(i)
                    ledger[cat] += 1
            labels = {name: start[f.name, idx] for name, idx in f.labels.items()}
            label_id = (label_ids or {}).get(f.name, f.label_id)
            new_fns.append(replace(f, body=body, labels=labels, injected=frozenset(injected),
                                   label_id=label_id))
        for f, cat in self.extra:
            new_fns.append(f)
            ledger[cat] += len(f.body)
        cfg = self.p.cfg
        new_cfg = CfgInfo(
            tuple(replace(s, instr_index=at[s.function, s.instr_index])
                  for s in cfg.indirect_call_sites),
            tuple(JumpSite(s.function, at[s.function, s.instr_index],
                           tuple(start[s.function, t] for t in s.targets))
                  for s in cfg.indirect_jump_sites),
            tuple(replace(s, instr_index=at[s.function, s.instr_index]) for s in cfg.setjmp_sites),
            tuple(replace(s, instr_index=at[s.function, s.instr_index]) for s in cfg.longjmp_sites),
        )
        out = clone(self.p)
        out.functions = new_fns
        out.cfg = new_cfg
        out.scheme = scheme.value
        out.ledger = dict(sorted(ledger.items()))
        validate(out)
        return out


def injected_total(p: Program) -> int:
    return sum(p.ledger.values())


# --------------------------------
# Passes
# --------------------------------

def _prepare(p: Program, scheme: Scheme, mcfg: MonitorConfig):
    if p.is_instrumented:
        raise InstrumentError("program is already instrumented")
    validate(p)
    a = _analyse(p)
    cfg = p.cfg
    if scheme in (Scheme.FIXER, Scheme.HCFI, Scheme.HECFI, Scheme.EXCEC):
        if len(cfg.indirect_call_sites) > mcfg.indirect_calls:
            raise CapacityError(f"{len(cfg.indirect_call_sites)} indirect call sites exceed "
                                f"INDIRECT_CALLS={mcfg.indirect_calls}")
        if len(cfg.indirect_targets) > mcfg.indirectly_called:
            raise CapacityError(f"{len(cfg.indirect_targets)} indirectly called functions exceed "
                                f"INDIRECTLY_CALLED={mcfg.indirectly_called}")
    if scheme in (Scheme.HECFI, Scheme.EXCEC) and \
            len(cfg.indirect_jump_sites) > mcfg.indirect_jumps:
        raise CapacityError(f"{len(cfg.indirect_jump_sites)} indirect jump sites exceed "
                            f"INDIRECT_JUMPS={mcfg.indirect_jumps}")
    if scheme in (Scheme.HAFIX, Scheme.HECFI) and len(p.functions) > mcfg.num_functions:
        raise CapacityError(f"{len(p.functions)} functions exceed "
                            f"NUM_FUNCTIONS={mcfg.num_functions}")
    if scheme in (Scheme.FIXER, Scheme.HECFI, Scheme.CET) and \
            (cfg.setjmp_sites or cfg.longjmp_sites):
        raise InstrumentError(f"setjmp/longjmp is not supported by {scheme.value}")
    for s in cfg.setjmp_sites:
        if s.slot_index >= mcfg.setjmp_calls:
            raise CapacityError(f"setjmp slot {s.slot_index} exceeds SETJMP_CALLS={mcfg.setjmp_calls}")
    return a


def _non_root_returns(a: _Analysis):
    return [(f, k) for f, k in a.returns if f != ENTRY_FUNCTION]


def _setjmp_markers(rw: _Rewriter, p: Program):
    for s in p.cfg.longjmp_sites:
        rw.before(s.function, s.instr_index, "longjmp", cfi("cfi_longjmp", 0))
    for s in p.cfg.setjmp_sites:
        rw.after(s.function, s.instr_index, "setjmp", cfi("cfi_setjmp", s.slot_index))


def _check_jump_targets(p: Program):
    seen = set()
    entries = {(t, 0) for t in p.cfg.indirect_targets}
    for s in p.cfg.indirect_jump_sites:
        for t in s.targets:
            key = (s.function, t)
            if key in seen or key in entries:
                raise InstrumentError(f"indirect jump target {s.function}[{t}] is shared "
                                      "with another indirect transfer")
            seen.add(key)


_FALLS_THROUGH_NOT = {CF.DIRECT_JUMP, CF.INDIRECT_JUMP, CF.RETURN}


def _skip_checks(rw: _Rewriter, p: Program, labels: LabelMap):
    """Route direct transfers past the label checks.

    A cfi_check outside a cfi_call/cfi_jump window is an invalid flow, so
    direct calls and branches to a checked entry or case label are moved to
    the instruction after the check, and fall-through into a checked case
    label gets an explicit jump over it.
    """
    checked = set(labels.target)
    for s in p.cfg.indirect_jump_sites:
        names = {idx: name for name, idx in p.function(s.function).labels.items()}
        for t in s.targets:
            if t not in names:
                raise InstrumentError(f"indirect jump target {s.function}[{t}] has no label")
            checked.add(names[t])
            prev = p.function(s.function).body[t - 1] if t else None
            if prev is not None and classify(prev) not in _FALLS_THROUGH_NOT:
                rw.after(s.function, t - 1, "check_skip", *_ins(f"j {names[t]}+4"))
    fns = []
    for f in p.functions:
        body = [replace(i, imm=i.imm + 4)
                if i.reloc in ("jal", "branch") and i.sym in checked else i
                for i in f.body]
        fns.append(replace(f, body=body))
    q = clone(p)
    q.functions = fns
    rw.p = q


def _forward_edges(rw: _Rewriter, p: Program, labels: LabelMap) -> list:
    """cfi_call/cfi_jump before indirect transfers, cfi_check at targets."""
    _check_jump_targets(p)
    _skip_checks(rw, p, labels)
    trampolines = []
    for k, s in enumerate(p.cfg.indirect_call_sites):
        jalr = p.function(s.function).body[s.instr_index]
        label = labels.site[k]
        if k in labels.trampolined:
            if jalr.imm:
                raise InstrumentError(f"{s.function}[{s.instr_index}]: trampolined call "
                                      "needs a zero jalr offset")
            tr, body = build_trampoline(k, s, jalr.rs1, labels)
            trampolines.append(tr)
            rw.add_function(Function(tr.name, body, {}, frozenset(range(len(body))),
                                     trampoline=True), "trampoline")
            reg = ABI_NAMES[jalr.rs1]
            spill = _ins("addi sp, sp, -4") + _ins(f"sw {reg}, 0(sp)") + _ins(f"la {reg}, {tr.name}")
            rw.before(s.function, s.instr_index, "trampoline_call", *spill)
        rw.before(s.function, s.instr_index, "label_set", cfi("cfi_call", label))
    for t, label in labels.target.items():
        rw.before(t, 0, "label_check", cfi("cfi_check", label), front=True)
    for j, s in enumerate(p.cfg.indirect_jump_sites):
        rw.before(s.function, s.instr_index, "label_set", cfi("cfi_jump", labels.jump[j]))
        for t in s.targets:
            rw.before(s.function, t, "label_check", cfi("cfi_check", labels.jump[j]), front=True)
    return trampolines


def instrument_fixer(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    a = _prepare(p, Scheme.FIXER, mcfg)
    rw = _Rewriter(p)
    for f, k, _ in a.direct_calls:
        rw.before(f, k, "shadow_push", cfi("fx_push", 2))
    for site, s in enumerate(p.cfg.indirect_call_sites):
        rw.before(s.function, s.instr_index, "shadow_push", cfi("fx_push", 3))
        rw.before(s.function, s.instr_index, "policy_check", cfi("fx_policy", site))
    for f, k in _non_root_returns(a):
        rw.before(f, k, "shadow_pop", cfi("fx_ret", 0))
    return rw.build(Scheme.FIXER)


def instrument_hafix(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    a = _prepare(p, Scheme.HAFIX, mcfg)
    rec = recursive_functions(p, a)
    ids = {f.name: n for n, f in enumerate(p.functions)}
    rw = _Rewriter(p)
    for f in p.functions:
        op = "hafix_act_rec" if f.name in rec else "hafix_act"
        rw.before(f.name, 0, "activate", cfi(op, ids[f.name]))
    for f, k in _non_root_returns(a):
        op = "hafix_deact_rec" if f in rec else "hafix_deact"
        rw.before(f, k, "deactivate", cfi(op, ids[f]))
    calls = [(f, k) for f, k, _ in a.direct_calls]
    calls += [(s.function, s.instr_index) for s in p.cfg.indirect_call_sites]
    for f, k in calls:
        rw.after(f, k, "return_check", cfi("hafix_check", ids[f]))
    return rw.build(Scheme.HAFIX, ids)


def instrument_hcfi(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    a = _prepare(p, Scheme.HCFI, mcfg)
    labels = assign_labels(p.cfg, Scheme.HCFI, mcfg)
    rw = _Rewriter(p)
    _setjmp_markers(rw, p)
    for f, k, _ in a.direct_calls:
        rw.before(f, k, "shadow_push", cfi("hcfi_push", 2))
    for site, s in enumerate(p.cfg.indirect_call_sites):
        rw.before(s.function, s.instr_index, "shadow_push", cfi("hcfi_push", 3))
        rw.before(s.function, s.instr_index, "label_set", cfi("hcfi_set", labels.site[site]))
    for t, label in labels.target.items():
        rw.before(t, 0, "label_check", cfi("hcfi_check", label), front=True)
    for f, k in _non_root_returns(a):
        rw.before(f, k, "shadow_pop", cfi("hcfi_pop", 0))
    return rw.build(Scheme.HCFI, labels.target)


def instrument_hecfi(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    a = _prepare(p, Scheme.HECFI, mcfg)
    labels = assign_labels(p.cfg, Scheme.HECFI, mcfg)
    ids = {f.name: n for n, f in enumerate(p.functions)}
    rw = _Rewriter(p)
    calls = [(f, k) for f, k, _ in a.direct_calls]
    calls += [(s.function, s.instr_index) for s in p.cfg.indirect_call_sites]
    for f, k in calls:
        rw.before(f, k, "shadow_push", cfi("hecfi_push", ids[f]))
        rw.after(f, k, "shadow_pop", cfi("hecfi_pop", ids[f]))
    _forward_edges(rw, p, labels)
    return rw.build(Scheme.HECFI, ids)


def instrument_cet(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    _prepare(p, Scheme.CET, mcfg)
    _check_jump_targets(p)
    rw = _Rewriter(p)
    for t in sorted(p.cfg.indirect_targets):
        rw.before(t, 0, "endbranch", cfi("endbr", 0), front=True)
    for s in p.cfg.indirect_jump_sites:
        for t in s.targets:
            rw.before(s.function, t, "endbranch", cfi("endbr", 0), front=True)
    return rw.build(Scheme.CET)


def instrument_excec(p: Program, mcfg: Optional[MonitorConfig] = None) -> Program:
    mcfg = mcfg or MonitorConfig()
    _prepare(p, Scheme.EXCEC, mcfg)
    labels = assign_labels(p.cfg, Scheme.EXCEC, mcfg)
    rw = _Rewriter(p)
    _setjmp_markers(rw, p)
    _forward_edges(rw, p, labels)
    return rw.build(Scheme.EXCEC, labels.target)


PASSES = {
    Scheme.FIXER: instrument_fixer,
    Scheme.HAFIX: instrument_hafix,
    Scheme.HCFI: instrument_hcfi,
    Scheme.HECFI: instrument_hecfi,
    Scheme.CET: instrument_cet,
    Scheme.EXCEC: instrument_excec,
}


def instrument(p: Program, scheme, mcfg: Optional[MonitorConfig] = None) -> Program:
    """Return an instrumented copy of ``p``; ``p`` itself is left untouched."""
    return PASSES[Scheme(scheme)](p, mcfg or MonitorConfig())


def trampolines_of(p: Program) -> list:
    return [f for f in p.functions if f.trampoline]


def ledger_text(p: Program) -> str:
    """Flat ``category count`` table, one row per line, ``total`` last."""
    rows = [f"{k} {v}" for k, v in sorted(p.ledger.items())]
    rows.append(f"total {injected_total(p)}")
    return "\n".join(rows) + "\n"
