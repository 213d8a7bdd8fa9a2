import pytest
from hypothesis import given, strategies as st

from cfisim.config import ALL_SCHEMES, EntryBits, MonitorConfig, Scheme
from cfisim.monitors import (DIRECT_CALL, INDIRECT_CALL, INDIRECT_JUMP, RETIRE, RETURN, CfiEvent,
                             Fsm, MonitorError, PolicyMatrix, ShadowStack, Verdict, cfi_event,
                             ff_cost, interrupts_masked, monitor_new, read_init, write_init)

OK = Verdict.OK
BASE = 0x1C000000


def enabled(scheme, cfg=None, init=None):
    m = monitor_new(scheme, cfg, init)
    assert m.on_event(cfi_event("cfi_enable")) is OK
    return m


def call(ret, target=BASE + 0x100):
    return CfiEvent(DIRECT_CALL, ret - 4, target=target, return_addr=ret)


def icall(ret, target):
    return CfiEvent(INDIRECT_CALL, ret - 4, target=target, return_addr=ret)


def ret(target):
    return CfiEvent(RETURN, BASE + 0x200, target=target)


def test_defaults():
    c = MonitorConfig()
    assert (c.shadow_stack_size, c.recursion_depth, c.indirect_calls, c.indirect_jumps,
            c.indirectly_called, c.num_functions, c.setjmp_calls) == (128, 128, 64, 64, 64, 1024, 8)
    assert c.counter_bits == 7
    assert c.entry_bits(Scheme.EXCEC) is EntryBits.BITS18TO1


def test_excec_push_is_masked():
    m = enabled(Scheme.EXCEC)
    assert m.on_event(call(0x1C008)) is OK
    assert m.stack.top() == (0xE004, 0)


def test_excec_return_mismatch_and_empty():
    m = enabled(Scheme.EXCEC)
    assert m.on_event(ret(BASE)) is Verdict.STACK_EMPTY
    m = enabled(Scheme.EXCEC)
    m.on_event(call(BASE + 8))
    assert m.on_event(ret(BASE + 12)) is Verdict.RETURN_MISMATCH
    with pytest.raises(MonitorError):
        m.on_event(ret(BASE + 8))


def test_excec_label_pair():
    m = enabled(Scheme.EXCEC)
    assert m.on_event(cfi_event("cfi_call", 0x42)) is OK
    assert m.fsm is Fsm.EXPECT_CHECK_AFTER_CALL
    assert m.on_event(icall(BASE + 8, BASE + 0x40)) is OK
    assert m.on_event(cfi_event("cfi_check", 0x42)) is OK
    assert m.fsm is Fsm.IDLE


@pytest.mark.parametrize("ev", [cfi_event("cfi_check", 0x42), CfiEvent(INDIRECT_JUMP, BASE, BASE),
                                call(BASE + 8), ret(BASE)])
def test_excec_call_must_be_followed_by_jalr(ev):
    m = enabled(Scheme.EXCEC)
    m.on_event(cfi_event("cfi_call", 0x42))
    assert m.on_event(ev) is Verdict.INVALID_FLOW


def test_excec_after_transfer_only_check():
    m = enabled(Scheme.EXCEC)
    m.on_event(cfi_event("cfi_jump", 5))
    m.on_event(CfiEvent(INDIRECT_JUMP, BASE, BASE + 0x40))
    assert m.on_event(CfiEvent(RETURN, BASE + 0x40, BASE)) is Verdict.INVALID_FLOW


def test_excec_check_zero_always_fails():
    m = enabled(Scheme.EXCEC)
    assert m.on_event(cfi_event("cfi_check", 0)) is Verdict.LABEL_MISMATCH
    m = enabled(Scheme.EXCEC)
    m.on_event(cfi_event("cfi_call", 0))
    m.on_event(icall(BASE + 8, BASE + 0x40))
    assert m.on_event(cfi_event("cfi_check", 0)) is Verdict.LABEL_MISMATCH


def test_shadow_stack_lifo_and_counters():
    s = ShadowStack(4, 18, recursion_depth=128)
    assert s.push(BASE + 8) is OK and s.pop_check(BASE + 8) is OK and s.sp == 0
    assert s.pop_check(BASE) is Verdict.STACK_EMPTY
    verdicts = [s.push(BASE + 8) for _ in range(130)]
    assert verdicts[:128] == [OK] * 128
    assert verdicts[128] is Verdict.RECURSION_EXCEEDED
    assert s.sp == 1 and s.top() == (((BASE + 8) >> 1) & 0x3FFFF, 127)


def test_shadow_stack_full():
    s = ShadowStack(3, 32)
    assert [s.push(BASE + 4 * k) for k in range(4)] == [OK, OK, OK, Verdict.STACK_FULL]


@given(st.lists(st.integers(0, (1 << 30) - 1).map(lambda a: a * 4), max_size=60))
def test_shadow_stack_balanced_sequences(addrs):
    s = ShadowStack(128, 18, recursion_depth=128)
    for a in addrs:
        assert s.push(a) is OK
    for a in reversed(addrs):
        assert s.pop_check(a) is OK
    assert s.sp == 0


def test_masking_limitation_documented():
    # addresses differing only above bit 18 or in bit 0 collide under the 18-bit mask
    s = ShadowStack(4, 18)
    s.push(0x1C000008)
    assert s.pop_check(0x1C080008 | 1) is OK      # differs in bit 19 and bit 0


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_disabled_monitor_is_transparent(scheme):
    m = monitor_new(scheme)
    events = [ret(BASE), cfi_event("cfi_check", 0), icall(BASE + 8, BASE), cfi_event("fx_ret"),
              cfi_event("hafix_check", 3), cfi_event("hecfi_pop", 1), CfiEvent(INDIRECT_JUMP, 0, 4)]
    before = repr(vars(m))
    for ev in events:
        assert m.on_event(ev) is OK
    assert repr(vars(m)) == before
    assert m.on_event(cfi_event("cfi_enable")) is OK and m.enabled


def test_reset_and_disable():
    m = enabled(Scheme.EXCEC)
    m.on_event(call(BASE + 8))
    m.on_event(cfi_event("cfi_reset"))
    assert not m.enabled and m.stack.sp == 0
    m = enabled(Scheme.EXCEC)
    m.on_event(cfi_event("cfi_call", 3))
    assert m.on_event(cfi_event("cfi_disable")) is Verdict.INVALID_FLOW


def test_setjmp_slots():
    m = enabled(Scheme.EXCEC)
    m.on_event(call(BASE + 8))
    assert m.on_event(cfi_event("cfi_setjmp", 2)) is OK
    m.on_event(call(BASE + 0x20))
    m.on_event(call(BASE + 0x30))
    assert m.on_event(cfi_event("cfi_longjmp")) is OK
    assert m.on_event(ret(BASE + 0x99)) is OK          # the longjmp's own return
    assert m.on_event(cfi_event("cfi_setjmp", 2)) is OK
    assert m.stack.sp == 1
    assert m.on_event(ret(BASE + 8)) is OK
    assert enabled(Scheme.EXCEC).on_event(cfi_event("cfi_setjmp", 8)) is Verdict.SETJMP_SLOT_INVALID


def test_hafix_inactive_target():
    m = enabled(Scheme.HAFIX)
    m.on_event(cfi_event("hafix_act", 3))
    m.on_event(cfi_event("hafix_act", 4))
    m.on_event(cfi_event("hafix_deact", 4))
    assert m.on_event(ret(BASE)) is OK
    assert m.on_event(cfi_event("hafix_check", 3)) is OK
    m.on_event(ret(BASE))
    assert m.on_event(cfi_event("hafix_check", 4)) is Verdict.INACTIVE_TARGET


def test_fixer_policy():
    pm = PolicyMatrix(4, 4)
    pm.add_target(BASE + 0x40, 0)
    pm.add_target(BASE + 0x80, 1)
    pm.allow(0, 0)
    m = enabled(Scheme.FIXER, init=pm)
    m.on_event(cfi_event("fx_policy", 0))
    assert m.on_event(icall(BASE + 8, BASE + 0x40)) is OK
    m.on_event(cfi_event("fx_policy", 0))
    assert m.on_event(icall(BASE + 8, BASE + 0x80)) is Verdict.POLICY_DENIED
    m = enabled(Scheme.FIXER, init=pm)
    m.on_event(cfi_event("fx_policy", 0))
    assert m.on_event(icall(BASE + 8, BASE + 0xC0)) is Verdict.POLICY_DENIED   # decoder miss


def test_fixer_instruction_driven_stack():
    m = enabled(Scheme.FIXER)
    assert m.on_event(cfi_event("fx_push", 2, pc=BASE)) is OK
    assert m.stack.top()[0] == BASE + 8
    assert m.on_event(cfi_event("fx_ret", ra=BASE + 12)) is Verdict.RETURN_MISMATCH


def test_cet_requires_endbr():
    m = enabled(Scheme.CET)
    m.on_event(CfiEvent(INDIRECT_JUMP, BASE, BASE + 0x40))
    assert interrupts_masked(m)
    assert m.on_event(CfiEvent(RETIRE, BASE + 0x40)) is Verdict.INVALID_FLOW
    m = enabled(Scheme.CET)
    m.on_event(CfiEvent(INDIRECT_JUMP, BASE, BASE + 0x40))
    assert m.on_event(cfi_event("endbr")) is OK and not interrupts_masked(m)


def test_interrupt_masking_only_for_protecting_schemes():
    for s in ALL_SCHEMES:
        m = enabled(s)
        if s is Scheme.EXCEC:
            m.on_event(cfi_event("cfi_call", 1))
            assert interrupts_masked(m)
        elif s is Scheme.HCFI:
            m.on_event(cfi_event("hcfi_set", 1))
            assert m.expecting and not interrupts_masked(m)
    assert not interrupts_masked(None)


def test_mon_v1_round_trip():
    pm = PolicyMatrix(64, 64)
    for k, a in enumerate((0x40, 0x80, 0x1000)):
        pm.add_target(BASE + a, k)
    pm.allow(0, 1)
    pm.allow(5, 2)
    text = write_init(pm)
    assert text.startswith("mon-v1 fixer 64 64 18\n")
    back = read_init(text)
    assert back.decoder == pm.decoder and (back.flags == pm.flags).all()
    with pytest.raises(ValueError):
        read_init("mon-v2 fixer 1 1 18\n")


def test_ff_cost():
    fx = ff_cost(Scheme.FIXER)
    assert (fx["policy_matrix"], fx["address_decoder"], fx["shadow_stack"]) == (4096, 1152, 4096)
    assert ff_cost(Scheme.EXCEC)["shadow_stack"] == 2304
    big = MonitorConfig(shadow_stack_size=256)
    for s in ALL_SCHEMES:
        a, b = ff_cost(s), ff_cost(s, big)
        assert a["total"] == sum(v for k, v in a.items() if k != "total")
        if "shadow_stack" in a:
            assert b["shadow_stack"] == 2 * a["shadow_stack"]
    assert ff_cost(Scheme.HAFIX)["active_set"] == 1024
