import pytest
from hypothesis import given, settings, strategies as st

from cfisim import harness
from cfisim.config import ALL_SCHEMES, Scheme
from cfisim.instrument import InstrumentError, instrument
from cfisim.monitors import Verdict
from cfisim.program import layout, program_from_source
from cfisim.sim import (CfiException, Completed, CorruptRegisterBeforeIndirect, FaultSpec,
                        FuelExhausted, IrqPlan, MemoryFault, OverwriteReturnSlot, RunStats,
                        fault_from_dict, overhead, run)

M = 0xFFFFFFFF


def s32(v):
    v &= M
    return v - (1 << 32) if v >> 31 else v


def oracle(op, a, b):
    """Reference RV32IM semantics on unsigned 32-bit operands."""
    sa, sb = s32(a), s32(b)
    if op == "add": return (a + b) & M
    if op == "sub": return (a - b) & M
    if op == "xor": return a ^ b
    if op == "or": return a | b
    if op == "and": return a & b
    if op == "sll": return (a << (b & 31)) & M
    if op == "srl": return a >> (b & 31)
    if op == "sra": return (sa >> (b & 31)) & M
    if op == "slt": return int(sa < sb)
    if op == "sltu": return int(a < b)
    if op == "mul": return (a * b) & M
    if op == "mulh": return ((sa * sb) >> 32) & M
    if op == "mulhu": return (a * b) >> 32
    if op == "mulhsu": return ((sa * b) >> 32) & M
    if op == "div":
        if b == 0: return M
        if sa == -(1 << 31) and sb == -1: return a
        q = abs(sa) // abs(sb)
        return (q if (sa < 0) == (sb < 0) else -q) & M
    if op == "divu": return M if b == 0 else a // b
    if op == "rem":
        if b == 0: return a
        if sa == -(1 << 31) and sb == -1: return 0
        r = abs(sa) % abs(sb)
        return (r if sa >= 0 else -r) & M
    if op == "remu": return a if b == 0 else a % b
    raise KeyError(op)


OPS = ["add", "sub", "xor", "or", "and", "sll", "srl", "sra", "slt", "sltu", "mul", "mulh",
       "mulhu", "mulhsu", "div", "divu", "rem", "remu"]
WORD = st.one_of(st.integers(0, M), st.sampled_from([0, 1, M, 1 << 31, (1 << 31) - 1, 2, M - 1]))


def alu_program(a, b):
    lines = [".func main", f"    li a0, {s32(a)}", f"    li a1, {s32(b)}", "    la t0, result"]
    for k, op in enumerate(OPS):
        lines += [f"    {op} a2, a0, a1", f"    sw a2, {4 * k}(t0)"]
    lines += ["    ret", ".endfunc", ".data", "result:", f"    .space {4 * len(OPS)}"]
    return "\n".join(lines) + "\n"


@settings(max_examples=60, deadline=None)
@given(WORD, WORD)
def test_alu_matches_oracle(a, b):
    st_ = run(layout(program_from_source(alu_program(a, b))))
    assert st_.completed
    assert list(st_.outputs[1]) == [oracle(op, a, b) for op in OPS]


def test_factorial_baseline():
    p = program_from_source(harness.corpus_source("factorial", REPS=1, N=10)[0])
    s = run(layout(p))
    assert isinstance(s.verdict, Completed)
    assert s.outputs[0] == 3628800


def test_determinism():
    case = harness.bench_case("indirect-dispatch")
    q, image, mon = harness.prepare(case.program, Scheme.EXCEC, None)
    a = run(image, mon, irq_plan=IrqPlan((10, 500, 501)))
    q, image, mon = harness.prepare(case.program, Scheme.EXCEC, None)
    b = run(image, mon, irq_plan=IrqPlan((10, 500, 501)))
    assert a == b


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_null_monitor_transparency(scheme):
    for name in ("factorial", "indirect-dispatch", "jump-table", "tak"):
        case = harness.bench_case(name)
        try:
            q = instrument(case.program, scheme)
        except InstrumentError:
            continue
        base = run(layout(case.program))
        s = run(layout(q))           # no monitor attached
        assert s.outputs == base.outputs
        assert s.retired_total - base.retired_total == s.retired_cfi


def test_excec_return_overwrite_detected():
    r = harness.run_scheme(harness.attack_program(), Scheme.EXCEC, None,
                           faults=[FaultSpec(OverwriteReturnSlot("gadget", sp_offset=4),
                                             at_pc="reload")])
    assert isinstance(r.verdict, CfiException) and r.verdict.kind is Verdict.RETURN_MISMATCH


def test_hafix_misses_corrupted_indirect_call():
    r = harness.run_scheme(harness.attack_program(), Scheme.HAFIX, None,
                           faults=[FaultSpec(CorruptRegisterBeforeIndirect(19, "add2"),
                                             at_pc="site2")])
    assert r.completed


def test_overhead():
    assert overhead(RunStats(retired_total=100000), RunStats(retired_total=100000)) == 0.0
    assert overhead(RunStats(retired_total=3), RunStats(retired_total=4)) == 33.33
    with pytest.raises(ValueError):
        overhead(RunStats(), RunStats(retired_total=1))


def test_call_micro_hcfi_overhead():
    case = harness.bench_case("call-micro", N=1000)
    base = run(layout(case.program))
    s = harness.run_scheme(case.program, Scheme.HCFI, None)
    assert s.retired_total - base.retired_total == 2000
    assert overhead(base, s) == round(2000 / base.retired_total * 100, 2)


def test_fuel_and_memory_faults():
    p = program_from_source(".func main\nloop:\n    j loop\n.endfunc\n")
    with pytest.raises(FuelExhausted):
        run(layout(p), fuel=1000)
    p = program_from_source(".func main\n    li t0, 4\n    lw a0, 0(t0)\n    ret\n.endfunc\n")
    with pytest.raises(MemoryFault):
        run(layout(p))
    p = program_from_source(".func main\n    la t0, main\n    sw zero, 0(t0)\n    ret\n.endfunc\n")
    with pytest.raises(MemoryFault):
        run(layout(p))


def test_irq_serviced_and_counted():
    case = harness.bench_case("factorial")
    s = run(layout(case.program), irq_plan=IrqPlan((5, 50, 51)))
    assert s.completed and s.irqs_serviced == 3
    assert s.outputs == run(layout(case.program)).outputs


def test_fault_records():
    f = fault_from_dict({"action": "CorruptRegisterBeforeIndirect", "reg": "s3",
                         "new_addr": "add1", "at_pc": "site1"})
    assert f.action == CorruptRegisterBeforeIndirect(19, "add1")
    with pytest.raises(ValueError):
        fault_from_dict({"action": "Teleport", "at_pc": 0})
    with pytest.raises(ValueError):
        FaultSpec(OverwriteReturnSlot(0), at_pc=0, at_retired_count=1)
