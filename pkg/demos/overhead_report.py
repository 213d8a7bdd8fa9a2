"""Benchmark the whole corpus under every scheme and print the overhead report.

    python3 demos/overhead_report.py [outdir]
"""
import sys

from cfisim import harness
from cfisim.config import ALL_SCHEMES

report = harness.bench_all(ALL_SCHEMES, harness.corpus())
print(harness.report_text(report))
print(harness.hwcost_text(harness.hwcost(ALL_SCHEMES)))
if len(sys.argv) > 1:
    for path in harness.emit_report(report, sys.argv[1]):
        print("wrote", path)
