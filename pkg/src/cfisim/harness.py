"""Benchmark corpus, overhead reports, the attack matrix and hardware costs."""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from string import Template
from typing import Optional

from .config import ALL_SCHEMES, MonitorConfig, Scheme
from .instrument import InstrumentError, instrument
from .isa import S3, T1
from .monitors import build_init, ff_cost, monitor_new
from .program import Program, code_size, layout, program_from_source
from .sim import (CfiException, CorruptRegisterBeforeIndirect, FaultSpec, IrqPlan,
                  OverwriteReturnSlot, RunStats, SimError, overhead, run)

CORPUS_DIR = Path(__file__).parent / "corpus"
REPORT_SCHEMA = "rep-v1"
M32 = 0xFFFFFFFF


# --------------------------------
# Reference outputs
# --------------------------------

def _fact(n):
    r = 1
    for k in range(2, n + 1):
        r = r * k & M32
    return r


def _expect_call_micro(N):
    return N, (N,)


def _expect_factorial(REPS, N):
    s1 = s2 = 0
    for _ in range(REPS):
        s1 = (s1 + _fact(N)) & M32
        s2 = (((s2 ^ s1) << 1) + (s1 >> 3)) & M32
    return s1, (s1, s2)


def _expect_nested(N):
    v = int(N % 2 == 0)
    return v, (v,)


def _tak(x, y, z):
    if y < x:
        return _tak(_tak(x - 1, y, z), _tak(y - 1, z, x), _tak(z - 1, x, y))
    return z


def _expect_tak(X, Y, Z):
    v = _tak(X, Y, Z) & M32
    return v, (v,)


def _expect_nqueens(N):
    def solve(row, cols):
        if row == N:
            return 1
        return sum(solve(row + 1, cols + [c]) for c in range(N)
                   if all(q != c and abs(q - c) != row - r for r, q in enumerate(cols)))
    v = solve(0, [])
    return v, (v,)


_OPS = [
    lambda a, b: a + b,
    lambda a, b: a ^ b,
    lambda a, b: a - b,
    lambda a, b: (a << 1) + b,
    lambda a, b: a ^ (a >> 3),
    lambda a, b: a + 77,
    lambda a, b: (a | b) - 3,
    lambda a, b: a * b + 1,
]


def _expect_dispatch(REPS, DIRECTS):
    acc = 1
    for i in range(REPS):
        acc = _OPS[i & 7](acc, i) & M32
        if (i & 7) < DIRECTS:
            acc = (acc + (acc << 5) + 7) & M32
    return acc, (acc,)


def _select(k, v):
    k &= 3
    if k == 0:
        return v + 3
    if k == 1:
        return v << 1
    if k == 2:
        return v ^ 0x55
    return -v


def _expect_jump_table(REPS):
    s = 0
    for i in range(REPS):
        s = (s + _select(i, (s + i) & M32)) & M32
    return s, (s,)


def _expect_setjmp(REPS, DEPTH):
    v = sum(42 + r for r in range(1, REPS + 1)) & M32
    return v, (v,)


def _expect_leaf_math(N):
    t1 = 0
    for t0 in range(1, N + 1):
        t1 = (t1 + t0 * t0) & M32
        t1 ^= t1 >> 7
    return t1, (t1,)


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    defaults: dict
    expect: object
    description: str


CORPUS = {
    e.name: e for e in [
        CorpusEntry("call-micro", {"N": 1000}, _expect_call_micro,
                    "N direct calls to a leaf"),
        CorpusEntry("factorial", {"REPS": 50, "N": 10}, _expect_factorial,
                    "recursive factorial, calls about 7.4% of retired instructions"),
        CorpusEntry("nested-recursion", {"N": 25}, _expect_nested,
                    "mutual recursion (refused by HAFIX)"),
        CorpusEntry("tak", {"X": 12, "Y": 8, "Z": 4}, _expect_tak,
                    "Takeuchi function, call heavy"),
        CorpusEntry("nqueens", {"N": 6}, _expect_nqueens,
                    "backtracking N-queens"),
        CorpusEntry("indirect-dispatch", {"REPS": 800, "DIRECTS": 5}, _expect_dispatch,
                    "function-pointer table, about 61% indirect calls"),
        CorpusEntry("jump-table", {"REPS": 400}, _expect_jump_table,
                    "switch through an indirect jump"),
        CorpusEntry("setjmp-micro", {"REPS": 4, "DEPTH": 5}, _expect_setjmp,
                    "setjmp/longjmp out of a recursion"),
        CorpusEntry("leaf-math", {"N": 500}, _expect_leaf_math,
                    "arithmetic loop, one call"),
    ]
}


# --------------------------------
# Corpus
# --------------------------------

def corpus_source(name: str, **params) -> tuple:
    """(assembly text, sidecar dict) for corpus program ``name``."""
    if name not in CORPUS and name != "attack":
        raise KeyError(f"unknown corpus program {name!r}")
    values = dict(CORPUS[name].defaults) if name in CORPUS else {}
    unknown = set(params) - set(values)
    if unknown:
        raise KeyError(f"{name} has no parameter(s) {sorted(unknown)}")
    values.update(params)
    text = Template((CORPUS_DIR / f"{name}.s").read_text()).substitute(
        {k: str(v) for k, v in values.items()})
    cfg = json.loads((CORPUS_DIR / f"{name}.cfg.json").read_text())
    return text, cfg


def load_program(name: str, **params) -> Program:
    text, cfg = corpus_source(name, **params)
    return program_from_source(text, cfg)


@dataclass
class BenchCase:
    name: str
    program: Program
    expected_output: tuple
    params: dict = field(default_factory=dict)
    call_density: float = 0.0
    indirect_share: float = 0.0
    baseline: Optional[RunStats] = None


class CorpusError(Exception):
    """A corpus program's baseline run disagrees with its reference output."""


def bench_case(name: str, **params) -> BenchCase:
    entry = CORPUS[name]
    values = {**entry.defaults, **params}
    p = load_program(name, **params)
    expected = entry.expect(**values)
    base = run(layout(p))
    if base.outputs != expected:
        raise CorpusError(f"{name}: baseline output {base.outputs} != expected {expected}")
    calls = base.calls_direct + base.calls_indirect
    return BenchCase(name, p, expected, values,
                     calls / base.retired_total,
                     base.calls_indirect / calls if calls else 0.0, base)


def corpus(names=None, **overrides) -> list:
    """Bench cases for ``names`` (default: all), each checked against its reference.

    ``overrides`` maps a program name to parameter overrides.
    """
    return [bench_case(n, **overrides.get(n, {})) for n in (names or CORPUS)]


# --------------------------------
# Running one program under one scheme
# --------------------------------

def prepare(p: Program, scheme, mcfg: Optional[MonitorConfig] = None):
    """Instrument, lay out and build a fresh monitor: (program, image, monitor)."""
    mcfg = mcfg or MonitorConfig()
    q = instrument(p, scheme, mcfg)
    image = layout(q)
    mon = monitor_new(scheme, mcfg, build_init(scheme, q, image, mcfg))
    return q, image, mon


def run_scheme(p: Program, scheme, mcfg: Optional[MonitorConfig] = None, faults=(),
               irq_plan: Optional[IrqPlan] = None, fuel: int = 10 ** 8) -> RunStats:
    _, image, mon = prepare(p, scheme, mcfg)
    return run(image, mon, fuel, faults, irq_plan)


# --------------------------------
# Overhead report
# --------------------------------

@dataclass(frozen=True)
class BenchRow:
    bench: str
    scheme: str
    status: str                     # "ok" or "refused"
    base_retired: int
    retired: int = 0
    runtime_overhead: float = 0.0   # percent
    base_code_bytes: int = 0
    code_bytes: int = 0
    code_overhead: float = 0.0      # percent
    injected: int = 0
    note: str = ""


@dataclass
class Report:
    rows: list
    ff: dict                         # scheme -> ff_cost breakdown
    attacks: Optional["AttackMatrix"] = None

    def ok_rows(self, scheme) -> list:
        return [r for r in self.rows if r.scheme == Scheme(scheme).value and r.status == "ok"]

    def summary(self) -> dict:
        """scheme -> {metric: {max, average, median}}, refusals excluded."""
        out = {}
        for s in dict.fromkeys(r.scheme for r in self.rows):
            rows = self.ok_rows(s)
            out[s] = {}
            for metric in ("runtime_overhead", "code_overhead"):
                vals = [getattr(r, metric) for r in rows]
                out[s][metric] = {
                    "max": round(max(vals), 2) if vals else 0.0,
                    "average": round(float(sum(Fraction(v).limit_denominator(10 ** 6)
                                               for v in vals) / len(vals)), 2) if vals else 0.0,
                    "median": round(statistics.median(vals), 2) if vals else 0.0,
                }
        return out


def _pct(base: int, new: int) -> float:
    return round(float(Fraction(new - base, base) * 100), 2)


def bench_all(schemes=ALL_SCHEMES, cases=None, mcfg: Optional[MonitorConfig] = None) -> Report:
    """Baseline plus per-scheme runs of every case; refusals are recorded, not fatal."""
    mcfg = mcfg or MonitorConfig()
    cases = corpus() if cases is None else cases
    rows = []
    for case in cases:
        base = case.baseline or run(layout(case.program))
        if base.outputs != case.expected_output:
            raise CorpusError(f"{case.name}: baseline output {base.outputs} "
                              f"!= expected {case.expected_output}")
        base_size = code_size(case.program)
        for s in schemes:
            s = Scheme(s)
            try:
                q, image, mon = prepare(case.program, s, mcfg)
            except InstrumentError as e:
                rows.append(BenchRow(case.name, s.value, "refused", base.retired_total,
                                     base_code_bytes=base_size, note=str(e)))
                continue
            stats = run(image, mon)
            if stats.outputs != case.expected_output:
                raise CorpusError(f"{case.name} under {s.value}: {stats.verdict}")
            rows.append(BenchRow(case.name, s.value, "ok", base.retired_total,
                                 stats.retired_total, overhead(base, stats), base_size,
                                 code_size(q), _pct(base_size, code_size(q)),
                                 sum(q.ledger.values())))
    return Report(rows, {Scheme(s).value: ff_cost(s, mcfg) for s in schemes})


# --------------------------------
# Attack matrix
# --------------------------------

SCOPE_ROWS = ("Function returns", "Indirect calls", "Indirect jumps", "Fine-grained CFG",
              "Protected interrupts")

# Expected protection scope per scheme (row -> schemes that cover it).
REFERENCE_SCOPE = {
    "Function returns": {"FIXER", "HAFIX", "HCFI", "HECFI", "CET", "EXCEC"},
    "Indirect calls": {"FIXER", "HCFI", "HECFI", "CET", "EXCEC"},
    "Indirect jumps": {"HECFI", "CET", "EXCEC"},
    "Fine-grained CFG": {"FIXER", "HCFI", "HECFI", "EXCEC"},
    "Protected interrupts": {"CET", "EXCEC"},
}

# Canned attacks against the ``attack`` corpus program, keyed by scope row.
ATTACKS = {
    "Function returns": FaultSpec(OverwriteReturnSlot("gadget", sp_offset=4), at_pc="reload"),
    "Indirect calls": FaultSpec(CorruptRegisterBeforeIndirect(S3, "add1+4"), at_pc="site1"),
    "Indirect jumps": FaultSpec(CorruptRegisterBeforeIndirect(T1, "sw_done"), at_pc="sw_jump"),
    "Fine-grained CFG": FaultSpec(CorruptRegisterBeforeIndirect(S3, "add1"), at_pc="site1"),
}


def attack_program() -> Program:
    return load_program("attack")


@dataclass
class AttackMatrix:
    cells: dict                      # (row, scheme) -> covered?
    detail: dict                     # (row, scheme) -> outcome text

    def schemes(self) -> list:
        return list(dict.fromkeys(s for _, s in self.cells))

    def matches_reference(self) -> bool:
        return all(v == (s in REFERENCE_SCOPE[r]) for (r, s), v in self.cells.items())

    def table(self) -> str:
        schemes = self.schemes()
        width = max(len(r) for r in SCOPE_ROWS)
        lines = [" " * width + "  " + "  ".join(f"{s:>5}" for s in schemes)]
        for r in SCOPE_ROWS:
            marks = ["    x" if self.cells[r, s] else "    ." for s in schemes]
            lines.append(f"{r:<{width}}  " + "  ".join(marks))
        return "\n".join(lines) + "\n"


def _outcome(stats_or_error) -> str:
    if isinstance(stats_or_error, Exception):
        return f"{type(stats_or_error).__name__}: {stats_or_error}"
    v = stats_or_error.verdict
    if isinstance(v, CfiException):
        return f"CfiException({v.kind.value} at {v.pc:#x})"
    return f"Completed{v.outputs}"


def irq_sweep(p: Program, scheme, mcfg: Optional[MonitorConfig] = None):
    """Raise the IRQ once at every retire boundary of a fault-free run.

    Returns (protected, runs) where ``runs`` holds (assert_at, RunStats) and
    protected means every run completed with the fault-free outputs.
    """
    mcfg = mcfg or MonitorConfig()
    q, image, mon = prepare(p, scheme, mcfg)
    ref = run(image, mon)
    runs = []
    ok = ref.completed
    for k in range(ref.retired_total):
        mon = monitor_new(scheme, mcfg, build_init(scheme, q, image, mcfg))
        try:
            st = run(image, mon, irq_plan=IrqPlan((k,)))
        except SimError:
            ok = False
            continue
        runs.append((k, st))
        if not st.completed or st.outputs != ref.outputs or st.irqs_serviced != 1:
            ok = False
    return ok, runs


def attack_matrix(schemes=ALL_SCHEMES, mcfg: Optional[MonitorConfig] = None) -> AttackMatrix:
    """Run each canned attack under each scheme; detected = CFI exception."""
    mcfg = mcfg or MonitorConfig()
    p = attack_program()
    cells, detail = {}, {}
    for s in schemes:
        s = Scheme(s)
        for row, fault in ATTACKS.items():
            try:
                st = run_scheme(p, s, mcfg, faults=[fault], fuel=10 ** 6)
                outcome = st
            except SimError as e:
                outcome = e
            cells[row, s.value] = (not isinstance(outcome, Exception)
                                   and isinstance(outcome.verdict, CfiException))
            detail[row, s.value] = _outcome(outcome)
        protected, runs = irq_sweep(p, s, mcfg)
        cells["Protected interrupts", s.value] = protected
        bad = [(k, _outcome(st)) for k, st in runs if not st.completed]
        detail["Protected interrupts", s.value] = (
            f"{len(runs)} IRQ positions, all clean" if protected
            else f"{len(bad)} of {len(runs)} IRQ positions broke the run, first: {bad[:1]}")
    ordered = {(r, Scheme(s).value): cells[r, Scheme(s).value] for r in SCOPE_ROWS for s in schemes}
    return AttackMatrix(ordered, detail)


# --------------------------------
# Hardware cost
# --------------------------------

def hwcost(schemes=ALL_SCHEMES, mcfg: Optional[MonitorConfig] = None) -> dict:
    mcfg = mcfg or MonitorConfig()
    return {Scheme(s).value: ff_cost(s, mcfg) for s in schemes}


def hwcost_text(costs: dict) -> str:
    lines = []
    for s, items in costs.items():
        lines.append(f"{s}")
        for k, v in items.items():
            if k != "total":
                lines.append(f"  {k:<20}{v:>8}")
        lines.append(f"  {'total':<20}{items['total']:>8}")
    return "\n".join(lines) + "\n"


# --------------------------------
# Report output
# --------------------------------

REPORT_COLUMNS = ("schema", "bench", "scheme", "status", "base_retired", "retired",
                  "runtime_overhead_pct", "base_code_bytes", "code_bytes",
                  "code_overhead_pct", "injected")


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.rows:
        w.writerow([REPORT_SCHEMA, r.bench, r.scheme, r.status, r.base_retired, r.retired,
                    f"{r.runtime_overhead:.2f}", r.base_code_bytes, r.code_bytes,
                    f"{r.code_overhead:.2f}", r.injected])
    return buf.getvalue()


def report_text(report: Report) -> str:
    schemes = list(dict.fromkeys(r.scheme for r in report.rows))
    benches = list(dict.fromkeys(r.bench for r in report.rows))
    cell = {(r.bench, r.scheme): r for r in report.rows}
    width = max([len(b) for b in benches] + [8])
    head = f"{'runtime %':<{width}}" + "".join(f"{s:>9}" for s in schemes)
    lines = [head, "-" * len(head)]
    for b in benches:
        vals = []
        for s in schemes:
            r = cell.get((b, s))
            vals.append(f"{'n/a':>9}" if r is None or r.status != "ok"
                        else f"{r.runtime_overhead:>9.2f}")
        lines.append(f"{b:<{width}}" + "".join(vals))
    summ = report.summary()
    lines.append("-" * len(head))
    for agg in ("max", "average", "median"):
        lines.append(f"{agg:<{width}}" + "".join(
            f"{summ[s]['runtime_overhead'][agg]:>9.2f}" for s in schemes))
    lines.append("")
    lines.append(f"{'code size %':<{width}}" + "".join(f"{s:>9}" for s in schemes))
    for agg in ("max", "average", "median"):
        lines.append(f"{agg:<{width}}" + "".join(
            f"{summ[s]['code_overhead'][agg]:>9.2f}" for s in schemes))
    lines.append("")
    lines.append(f"{'flip-flops':<{width}}" + "".join(
        f"{report.ff[s]['total']:>9}" for s in schemes if s in report.ff))
    if report.attacks is not None:
        lines.append("")
        lines.append(report.attacks.table().rstrip("\n"))
    return "\n".join(lines) + "\n"


def figure_csvs(report: Report) -> dict:
    """One CSV per comparison figure: runtime, hardware, combined overview."""
    summ = report.summary()
    schemes = list(summ)
    runtime = io.StringIO()
    w = csv.writer(runtime, lineterminator="\n")
    w.writerow(["scheme", "bench", "runtime_overhead_pct"])
    for r in report.rows:
        if r.status == "ok":
            w.writerow([r.scheme, r.bench, f"{r.runtime_overhead:.2f}"])
    hw = io.StringIO()
    w = csv.writer(hw, lineterminator="\n")
    w.writerow(["scheme", "component", "flip_flops"])
    for s in schemes:
        for k, v in report.ff.get(s, {}).items():
            w.writerow([s, k, v])
    ov = io.StringIO()
    w = csv.writer(ov, lineterminator="\n")
    w.writerow(["scheme", "runtime_avg_pct", "code_size_avg_pct", "flip_flops"])
    for s in schemes:
        w.writerow([s, f"{summ[s]['runtime_overhead']['average']:.2f}",
                    f"{summ[s]['code_overhead']['average']:.2f}",
                    report.ff.get(s, {}).get("total", 0)])
    return {"fig_runtime.csv": runtime.getvalue(), "fig_hardware.csv": hw.getvalue(),
            "fig_overview.csv": ov.getvalue()}


def emit_report(report: Report, outdir, formats=("csv", "text", "figures")) -> list:
    """Write the report files into ``outdir``; returns the written paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(out / "report.csv")
        written[-1].write_text(report_csv(report))
    if "text" in formats:
        written.append(out / "report.txt")
        written[-1].write_text(report_text(report))
    if "figures" in formats:
        for name, text in figure_csvs(report).items():
            written.append(out / name)
            written[-1].write_text(text)
    return written
