"""Fire each canned control-flow attack at every scheme and show what happens.

    python3 demos/attack_walkthrough.py
"""
from cfisim import harness
from cfisim.config import ALL_SCHEMES

m = harness.attack_matrix(ALL_SCHEMES)
for row in harness.ATTACKS:
    print(f"\n{row}")
    for s in ALL_SCHEMES:
        mark = "stopped " if m.cells[row, s.value] else "missed  "
        print(f"  {s.value:<6} {mark} {m.detail[row, s.value]}")
print()
print(m.table())
print("matches reference table:", m.matches_reference())
