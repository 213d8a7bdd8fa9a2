import pytest

from cfisim import harness
from cfisim.config import ALL_SCHEMES, MonitorConfig, Scheme
from cfisim.instrument import (CapacityError, InstrumentError, assign_labels, build_trampoline,
                               injected_total, instrument, ledger_text, needs_trampoline,
                               trampolines_of)
from cfisim.isa import cfi, format_instruction
from cfisim.program import code_size, program_from_source

TWO_SITES = """
.func main
    addi sp, sp, -4
    sw ra, 0(sp)
    li a0, 1
    call inc
    call inc
    lw ra, 0(sp)
    addi sp, sp, 4
    ret
.endfunc
.func inc
    addi a0, a0, 1
    ret
.endfunc
"""


def mnemonics(f):
    return [i.mnemonic for i in f.body]


def test_call_micro_excec_and_cet_inject_nothing():
    p = harness.load_program("call-micro")
    for s in (Scheme.EXCEC, Scheme.CET):
        q = instrument(p, s)
        assert injected_total(q) == 0
        assert code_size(q) == code_size(p)


def test_baseline_untouched():
    p = harness.load_program("indirect-dispatch")
    before = [list(f.body) for f in p.functions]
    instrument(p, Scheme.EXCEC)
    assert [f.body for f in p.functions] == before
    assert not p.is_instrumented


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_ledger_exact_and_idempotence_guard(scheme):
    for name in harness.CORPUS:
        p = harness.load_program(name)
        try:
            q = instrument(p, scheme)
        except InstrumentError:
            continue
        assert injected_total(q) == (code_size(q) - code_size(p)) // 4
        lines = ledger_text(q).splitlines()
        assert lines[-1] == f"total {injected_total(q)}"
        with pytest.raises(InstrumentError, match="already instrumented"):
            instrument(q, scheme)


def test_excec_trampoline_shape():
    p = harness.attack_program()
    q = instrument(p, Scheme.EXCEC)
    tr = trampolines_of(q)
    assert len(tr) == 2               # site2's targets are reached from nowhere else
    first = q.function("_tr_main_8")
    text = [format_instruction(i) for i in first.body]
    assert text[0] == "cfi_check 0x42"
    assert text[1:3] == ["lw s3, 0(sp)", "addi sp, sp, 4"]
    assert text[5] == "beq s3, t0, lt+4" and text[8] == "beq s3, t0, gt+4"
    assert first.body[-1] == cfi("cfi_check", 0)
    assert len(first.body) == 3 + 3 * 2 + 1
    assert len(q.function("_tr_main_19").body) == 3 + 3 + 1   # one-entry table for gt
    caller = [format_instruction(i) for i in q.function("main").body]
    k = caller.index("cfi_call 0x42")
    assert caller[k - 4:k] == ["addi sp, sp, -4", "sw s3, 0(sp)",
                               "lui s3, %hi(_tr_main_8)", "addi s3, s3, %lo(_tr_main_8)"]
    assert caller[k + 1] == "jalr ra, 0(s3)"


def test_build_trampoline_entry_order():
    p = harness.attack_program()
    labels = assign_labels(p.cfg, Scheme.EXCEC, MonitorConfig())
    site = p.cfg.indirect_call_sites[0]
    tr, body = build_trampoline(0, site, 19, labels)
    assert [e.target for e in tr.entries] == list(site.targets)
    assert body[0] == cfi("cfi_check", labels.site[0]) and body[-1] == cfi("cfi_check", 0)


def test_single_target_single_caller_gets_label_pair():
    p = harness.attack_program()
    assert needs_trampoline(p.cfg) == {0, 2}
    q = instrument(p, Scheme.EXCEC)
    assert q.function("add1").body[0] == cfi("cfi_check", 0x43)


def test_label_assignment():
    p = harness.attack_program()
    hcfi = assign_labels(p.cfg, Scheme.HCFI, MonitorConfig())
    # {lt, gt} and {gt} overlap, so the class shares one label
    assert hcfi.target["lt"] == hcfi.target["gt"] == hcfi.site[0] == hcfi.site[2]
    for s in (Scheme.EXCEC, Scheme.HECFI):
        m = assign_labels(p.cfg, s, MonitorConfig())
        assert len(set(m.site.values())) == len(m.site)
    for s in (Scheme.HCFI, Scheme.EXCEC, Scheme.HECFI):
        m = assign_labels(p.cfg, s, MonitorConfig())
        assert 0 not in set(m.site.values()) | set(m.target.values()) | set(m.jump.values())


def test_hcfi_push_per_call_pop_per_callee():
    p = program_from_source(TWO_SITES)
    q = instrument(p, Scheme.HCFI)
    assert q.ledger == {"shadow_push": 2, "shadow_pop": 1}   # one per call, one per callee return


def test_hecfi_larger_than_hcfi_with_multiple_sites():
    p = program_from_source(TWO_SITES)
    hc, he = instrument(p, Scheme.HCFI), instrument(p, Scheme.HECFI)
    assert code_size(he) > code_size(hc)


def test_cet_marks_only_indirect_targets():
    p = harness.attack_program()
    q = instrument(p, Scheme.CET)
    marked = {f.name for f in q.functions if f.body[0].mnemonic == "endbr"}
    assert marked == {"lt", "gt", "add1", "add2"}
    sel = q.function("select")
    assert mnemonics(sel).count("endbr") == 4


def test_fixer_one_instruction_per_operation():
    p = program_from_source(TWO_SITES)
    q = instrument(p, Scheme.FIXER)
    assert q.ledger == {"shadow_push": 2, "shadow_pop": 1}


def test_hafix_instruments_every_call():
    p = program_from_source(TWO_SITES)
    q = instrument(p, Scheme.HAFIX)
    assert injected_total(q) >= 3 * 2 - 1


def test_direct_calls_skip_entry_checks():
    text = TWO_SITES.replace("    call inc\n    call inc\n",
                             "    call inc\n    la t1, inc\nsite:\n    jalr ra, 0(t1)\n")
    cfg = {"schema": "cfg-v1", "indirect_call_sites": [
        {"function": "main", "at": "site", "targets": ["inc"], "site_label": 5}]}
    q = instrument(program_from_source(text, cfg), Scheme.EXCEC)
    call = next(i for i in q.function("main").body if i.mnemonic == "jal")
    assert (call.sym, call.imm) == ("inc", 4)


REFUSALS = [
    ("setjmp-micro", Scheme.FIXER, "setjmp"),
    ("setjmp-micro", Scheme.HECFI, "setjmp"),
    ("setjmp-micro", Scheme.CET, "setjmp"),
    ("nested-recursion", Scheme.HAFIX, "recursion"),
]


@pytest.mark.parametrize("name,scheme,why", REFUSALS)
def test_refusals(name, scheme, why):
    with pytest.raises(InstrumentError, match=why):
        instrument(harness.load_program(name), scheme)


def test_hafix_refuses_mutual_recursion():
    text = """
.func main
    addi sp, sp, -4
    sw ra, 0(sp)
    li a0, 3
    call even
    lw ra, 0(sp)
    addi sp, sp, 4
    ret
.endfunc
.func even
    beqz a0, even_done
    addi sp, sp, -4
    sw ra, 0(sp)
    addi a0, a0, -1
    call odd
    lw ra, 0(sp)
    addi sp, sp, 4
even_done:
    ret
.endfunc
.func odd
    beqz a0, odd_done
    addi sp, sp, -4
    sw ra, 0(sp)
    addi a0, a0, -1
    call even
    lw ra, 0(sp)
    addi sp, sp, 4
odd_done:
    ret
.endfunc
"""
    p = program_from_source(text)
    with pytest.raises(InstrumentError, match="recursion"):
        instrument(p, Scheme.HAFIX)
    assert instrument(p, Scheme.EXCEC) is not None


def test_tail_call_rejected():
    text = TWO_SITES.replace(".func inc\n", ".func inc\n    j other\n.endfunc\n.func other\n")
    p = program_from_source(text)
    with pytest.raises(InstrumentError, match="tail"):
        instrument(p, Scheme.HCFI)


def test_undeclared_indirect_call_rejected():
    text = TWO_SITES.replace("    call inc\n    call inc\n", "    la t1, inc\n    jalr ra, 0(t1)\n")
    with pytest.raises(InstrumentError):
        instrument(program_from_source(text), Scheme.EXCEC)


def test_capacity_errors():
    p = harness.attack_program()
    with pytest.raises(CapacityError):
        instrument(p, Scheme.EXCEC, MonitorConfig(indirect_calls=2))
    with pytest.raises(CapacityError):
        instrument(p, Scheme.FIXER, MonitorConfig(indirectly_called=3))
    with pytest.raises(CapacityError):
        instrument(harness.load_program("tak"), Scheme.HAFIX, MonitorConfig(num_functions=1))
