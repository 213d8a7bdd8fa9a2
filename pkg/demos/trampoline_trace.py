"""Show an EXCEC trampoline and the monitor FSM stepping through it.

    python3 demos/trampoline_trace.py
"""
from cfisim import harness
from cfisim.config import Scheme
from cfisim.instrument import ledger_text, trampolines_of
from cfisim.monitors import Verdict
from cfisim.program import format_program
from cfisim.sim import run

p = harness.attack_program()
q, image, mon = harness.prepare(p, Scheme.EXCEC)

print("injected instructions by category:")
print(ledger_text(q))
tramp = trampolines_of(q)[0]
print(f"first trampoline ({tramp.name}):")
listing = format_program(q).splitlines()
start = next(k for k, line in enumerate(listing) if tramp.name in line and "func" in line)
end = next(k for k in range(start, len(listing)) if listing[k].startswith(".endfunc"))
print("\n".join(listing[start:end + 1]))

where = {}
for name, (lo, hi) in image.functions.items():
    for a in range(lo, hi, 4):
        where[a] = name

inner = mon.on_event
shown = []


def traced(ev):
    before = mon.fsm
    v = inner(ev)
    if (before is not mon.fsm or ev.mnemonic and ev.mnemonic.startswith("cfi")) and len(shown) < 24:
        shown.append(f"  {ev.pc:#010x} {where.get(ev.pc, '?'):<14} {ev.kind.name:<13} "
                     f"{ev.mnemonic or '':<11} {before.name} -> {mon.fsm.name}"
                     + ("" if v is Verdict.OK else f"  [{v.value}]"))
    return v


mon.on_event = traced
st = run(image, mon)
print("\nmonitor trace (state changes and CFI instructions, first 24):")
print("\n".join(shown))
print("\nrun verdict:", type(st.verdict).__name__, "retired", st.retired_total)
