"""Command-line entry point: ``python -m cfisim <command> ...``.

Exit codes: 0 success, 1 CFI exception during ``run``, 2 usage or input
error, 3 simulation fault (memory fault, fuel exhausted).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .asm import AsmError
from .config import ALL_SCHEMES, EntryBits, MonitorConfig, Scheme
from .instrument import InstrumentError, instrument, ledger_text
from .monitors import build_init, monitor_new, read_init, write_init
from .program import ProgramError, cfg_to_dict, format_program, layout, load
from .sim import CfiException, IrqPlan, SimError, fault_from_dict, run

EXIT_OK, EXIT_CFI, EXIT_USAGE, EXIT_SIM = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _schemes(text):
    if not text:
        return list(ALL_SCHEMES)
    return [Scheme.parse(s) for s in text.split(",")]


def _mcfg(args) -> MonitorConfig:
    return MonitorConfig(
        shadow_stack_size=args.shadow_stack_size,
        recursion_depth=args.recursion_depth,
        indirect_calls=args.indirect_calls,
        indirect_jumps=args.indirect_jumps,
        indirectly_called=args.indirectly_called,
        num_functions=args.num_functions,
        setjmp_calls=args.setjmp_calls,
        shadow_entry_bits=EntryBits(args.entry_bits) if args.entry_bits else None,
        recursion_counters=not args.no_recursion_counters,
    )


def _add_monitor_args(p):
    d = MonitorConfig()
    g = p.add_argument_group("monitor configuration")
    g.add_argument("--shadow-stack-size", type=int, default=d.shadow_stack_size)
    g.add_argument("--recursion-depth", type=int, default=d.recursion_depth)
    g.add_argument("--indirect-calls", type=int, default=d.indirect_calls)
    g.add_argument("--indirect-jumps", type=int, default=d.indirect_jumps)
    g.add_argument("--indirectly-called", type=int, default=d.indirectly_called)
    g.add_argument("--num-functions", type=int, default=d.num_functions)
    g.add_argument("--setjmp-calls", type=int, default=d.setjmp_calls)
    g.add_argument("--entry-bits", choices=[e.value for e in EntryBits])
    g.add_argument("--no-recursion-counters", action="store_true")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: {e}") from None


# --------------------------------
# Commands
# --------------------------------

def cmd_instrument(args) -> int:
    mcfg = _mcfg(args)
    p = load(args.input, args.cfg)
    q = instrument(p, Scheme.parse(args.scheme), mcfg)
    text = format_program(q)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.ledger:
        Path(args.ledger).write_text(ledger_text(q))
    if args.cfg_out:
        Path(args.cfg_out).write_text(json.dumps(cfg_to_dict(q.cfg), indent=2) + "\n")
    if args.init_out:
        init = build_init(q.scheme, q, layout(q), mcfg)
        Path(args.init_out).write_text(write_init(init) if init is not None else "")
    return EXIT_OK


def cmd_run(args) -> int:
    mcfg = _mcfg(args)
    p = load(args.image, args.cfg)
    scheme = None if args.scheme in (None, "none") else Scheme.parse(args.scheme)
    if scheme is not None and not p.is_instrumented:
        p = instrument(p, scheme, mcfg)
    image = layout(p)
    mon = None
    if scheme is not None:
        if args.init:
            init = read_init(Path(args.init).read_text())
        else:
            init = build_init(scheme, p, image, mcfg)
        mon = monitor_new(scheme, mcfg, init)
    faults = [fault_from_dict(d) for d in _read_json(args.faults)] if args.faults else []
    irq = None
    if args.irq:
        d = _read_json(args.irq)
        irq = IrqPlan(tuple(d.get("assert_at", d) if isinstance(d, dict) else d))
    try:
        stats = run(image, mon, args.fuel, faults, irq)
    except SimError as e:
        print(f"simulation fault: {e}", file=sys.stderr)
        return EXIT_SIM
    rec = stats.as_record()
    text = json.dumps(rec, indent=2, sort_keys=True) + "\n"
    if args.stats:
        Path(args.stats).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_CFI if isinstance(stats.verdict, CfiException) else EXIT_OK


def cmd_bench(args) -> int:
    mcfg = _mcfg(args)
    names = args.programs.split(",") if args.programs else None
    report = harness.bench_all(_schemes(args.schemes), harness.corpus(names), mcfg)
    if args.attacks:
        report.attacks = harness.attack_matrix(_schemes(args.schemes), mcfg)
    if args.out:
        harness.emit_report(report, args.out)
    sys.stdout.write(harness.report_text(report))
    return EXIT_OK


def cmd_attack_matrix(args) -> int:
    m = harness.attack_matrix(_schemes(args.schemes), _mcfg(args))
    sys.stdout.write(m.table())
    if args.verbose:
        for (row, s), text in m.detail.items():
            print(f"{row:<22}{s:<7}{text}")
    return EXIT_OK


def cmd_hwcost(args) -> int:
    costs = harness.hwcost(_schemes(args.schemes), _mcfg(args))
    if args.json:
        sys.stdout.write(json.dumps(costs, indent=2) + "\n")
    else:
        sys.stdout.write(harness.hwcost_text(costs))
    return EXIT_OK


def cmd_corpus(args) -> int:
    if args.action == "list":
        for name, e in harness.CORPUS.items():
            params = " ".join(f"{k}={v}" for k, v in e.defaults.items())
            print(f"{name:<20}{params:<22}{e.description}")
        return EXIT_OK
    if not args.name:
        raise UsageError("corpus show needs a program name")
    params = {}
    for kv in args.param or ():
        k, _, v = kv.partition("=")
        params[k] = int(v, 0)
    try:
        text, cfg = harness.corpus_source(args.name, **params)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    sys.stdout.write(text)
    if args.cfg_out:
        Path(args.cfg_out).write_text(json.dumps(cfg, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfisim", description="CFI scheme simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="instrument an assembly program")
    p.add_argument("--scheme", required=True)
    p.add_argument("--cfg", help="cfg-v1 sidecar")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--ledger", help="write the injected-instruction counts here")
    p.add_argument("--cfg-out", help="write the sidecar remapped to the new program")
    p.add_argument("--init-out", help="write mon-v1 monitor initialisation data")
    _add_monitor_args(p)
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("run", help="simulate a program")
    p.add_argument("--scheme", help="monitor to attach (default: none)")
    p.add_argument("--image", required=True, help="assembly program, instrumented or not")
    p.add_argument("--cfg")
    p.add_argument("--init", help="mon-v1 initialisation data")
    p.add_argument("--faults", help="JSON list of fault records")
    p.add_argument("--irq", help='JSON {"assert_at": [...]}')
    p.add_argument("--stats", help="write the run record here")
    p.add_argument("--fuel", type=int, default=10 ** 8)
    _add_monitor_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="overhead report over the corpus")
    p.add_argument("--schemes")
    p.add_argument("--programs")
    p.add_argument("--out", help="directory for rep-v1 CSV, text table and figure CSVs")
    p.add_argument("--attacks", action="store_true", help="include the attack matrix")
    _add_monitor_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("attack-matrix", help="protection-scope matrix")
    p.add_argument("--schemes")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_monitor_args(p)
    p.set_defaults(func=cmd_attack_matrix)

    p = sub.add_parser("hwcost", help="flip-flop cost per scheme")
    p.add_argument("--schemes")
    p.add_argument("--json", action="store_true")
    _add_monitor_args(p)
    p.set_defaults(func=cmd_hwcost)

    p = sub.add_parser("corpus", help="list or print corpus programs")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("name", nargs="?")
    p.add_argument("--param", action="append", help="NAME=VALUE template parameter")
    p.add_argument("--cfg-out")
    p.set_defaults(func=cmd_corpus)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, ProgramError, AsmError, InstrumentError) as e:
        print(f"cfisim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
