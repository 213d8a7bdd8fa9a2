import json

import pytest
from hypothesis import given, settings, strategies as st

from cfisim import harness
from cfisim.config import ALL_SCHEMES, Scheme
from cfisim.instrument import InstrumentError, injected_total, instrument
from cfisim.program import (Program, ProgramError, cfg_to_dict, code_size, format_program,
                            layout, load, program_from_source)

ONE = ".func main\n    li a0, 7\n    ret\n.endfunc\n"


def test_single_function_empty_sidecar():
    p = program_from_source(ONE, {"schema": "cfg-v1"})
    assert len(p.functions) == 1
    assert p.cfg.indirect_call_sites == () and p.cfg.indirect_jump_sites == ()


def test_dangling_sidecar_reference_names_symbol():
    cfg = {"schema": "cfg-v1", "indirect_call_sites": [
        {"function": "main", "instr_index": 0, "targets": ["gt"], "site_label": 1}]}
    with pytest.raises(ProgramError, match="gt"):
        program_from_source(ONE, cfg)


def test_malformed_sidecar(tmp_path):
    (tmp_path / "p.s").write_text(ONE)
    (tmp_path / "p.json").write_text("{not json")
    with pytest.raises(ProgramError):
        load(tmp_path / "p.s", tmp_path / "p.json")


def test_dispatch_program_sidecar():
    p = harness.load_program("indirect-dispatch")
    (site,) = p.cfg.indirect_call_sites
    assert len(site.targets) == 8
    assert site.site_label == 66


def test_code_size():
    assert code_size(Program([])) == 0
    text = ".func main\n" + "    nop\n" * 9 + "    ret\n.endfunc\n"
    assert code_size(program_from_source(text)) == 40


def test_layout_deterministic_and_contiguous():
    p = harness.load_program("tak")
    a, b = layout(p), layout(p)
    assert a.words == b.words and a.symbols == b.symbols
    spans = [a.functions[f.name] for f in p.functions]
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        assert e0 == s1
    assert all(s % 4 == 0 for s, _ in spans)


def test_layout_memory_bound():
    p = harness.load_program("call-micro")
    with pytest.raises(ProgramError):
        layout(p, mem_size=256)


def test_format_round_trip():
    for name in harness.CORPUS:
        p = harness.load_program(name)
        q = program_from_source(format_program(p), cfg_to_dict(p.cfg))
        assert layout(q).words == layout(p).words


def test_instrumented_format_round_trip_keeps_injection_marks():
    p = harness.load_program("indirect-dispatch")
    q = instrument(p, Scheme.EXCEC)
    r = program_from_source(format_program(q), cfg_to_dict(q.cfg))
    assert r.is_instrumented
    assert [f.injected for f in r.functions] == [f.injected for f in q.functions]


@pytest.mark.parametrize("scheme", ALL_SCHEMES)
def test_code_size_delta_is_ledger(scheme):
    for name in harness.CORPUS:
        p = harness.load_program(name)
        try:
            q = instrument(p, scheme)
        except InstrumentError:
            continue
        assert code_size(q) - code_size(p) == 4 * injected_total(q)


def test_call_micro_hcfi_two_per_pair():
    p = harness.load_program("call-micro")
    q = instrument(p, Scheme.HCFI)
    callees = [f for f in p.functions if f.name != "main"]
    assert code_size(q) - code_size(p) == 4 * 2 * len(callees)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-2048, 2047), min_size=1, max_size=20))
def test_layout_idempotent_generated(values):
    body = "".join(f"    addi a0, a0, {v}\n" for v in values)
    p = program_from_source(f".func main\n{body}    ret\n.endfunc\n")
    img = layout(p)
    assert layout(program_from_source(format_program(p))).words == img.words
    assert code_size(p) == 4 * (len(values) + 1)


def test_sidecar_json_round_trip():
    p = harness.load_program("jump-table")
    d = cfg_to_dict(p.cfg)
    assert json.loads(json.dumps(d)) == d
    assert program_from_source(format_program(p), d).cfg == p.cfg
