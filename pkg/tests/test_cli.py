import json
import subprocess
import sys

import pytest

from cfisim import harness
from cfisim.cli import EXIT_CFI, EXIT_OK, EXIT_SIM, EXIT_USAGE, main


@pytest.fixture
def attack_files(tmp_path):
    text, cfg = harness.corpus_source("attack")
    (tmp_path / "a.s").write_text(text)
    (tmp_path / "a.json").write_text(json.dumps(cfg))
    return tmp_path


def test_instrument_then_run(attack_files, capsys):
    d = attack_files
    rc = main(["instrument", "--scheme", "excec", "--in", str(d / "a.s"), "--cfg", str(d / "a.json"),
               "--out", str(d / "x.s"), "--ledger", str(d / "ledger.txt"),
               "--cfg-out", str(d / "x.json")])
    assert rc == EXIT_OK
    ledger = dict(line.split() for line in (d / "ledger.txt").read_text().splitlines())
    assert int(ledger["total"]) == sum(int(v) for k, v in ledger.items() if k != "total")
    rc = main(["run", "--scheme", "EXCEC", "--image", str(d / "x.s"), "--cfg", str(d / "x.json"),
               "--stats", str(d / "stats.json")])
    assert rc == EXIT_OK
    assert json.loads((d / "stats.json").read_text())["verdict"] == "Completed"


def test_run_with_fault_exits_one(attack_files):
    d = attack_files
    (d / "f.json").write_text(json.dumps([{"action": "OverwriteReturnSlot", "new_addr": "gadget",
                                           "sp_offset": 4, "at_pc": "reload"}]))
    rc = main(["run", "--scheme", "hcfi", "--image", str(d / "a.s"), "--cfg", str(d / "a.json"),
               "--faults", str(d / "f.json"), "--stats", str(d / "s.json")])
    assert rc == EXIT_CFI
    rec = json.loads((d / "s.json").read_text())
    assert rec["verdict"] == "CfiException" and rec["kind"] == "ReturnMismatch"


def test_fixer_init_round_trip(attack_files):
    d = attack_files
    assert main(["instrument", "--scheme", "FIXER", "--in", str(d / "a.s"), "--cfg", str(d / "a.json"),
                 "--out", str(d / "x.s"), "--cfg-out", str(d / "x.json"),
                 "--init-out", str(d / "mon.txt")]) == EXIT_OK
    assert (d / "mon.txt").read_text().startswith("mon-v1 fixer")
    assert main(["run", "--scheme", "FIXER", "--image", str(d / "x.s"), "--cfg", str(d / "x.json"),
                 "--init", str(d / "mon.txt"), "--stats", str(d / "s.json")]) == EXIT_OK


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["instrument", "--scheme", "nope", "--in", "x.s"]) == EXIT_USAGE
    assert main(["instrument", "--scheme", "EXCEC", "--in", str(tmp_path / "missing.s")]) == EXIT_USAGE
    assert main(["corpus", "show"]) == EXIT_USAGE
    assert main(["corpus", "show", "no-such"]) == EXIT_USAGE
    setjmp = harness.corpus_source("setjmp-micro")
    (tmp_path / "s.s").write_text(setjmp[0])
    (tmp_path / "s.json").write_text(json.dumps(setjmp[1]))
    assert main(["instrument", "--scheme", "CET", "--in", str(tmp_path / "s.s"),
                 "--cfg", str(tmp_path / "s.json")]) == EXIT_USAGE
    assert "setjmp" in capsys.readouterr().err


def test_simulation_fault_exit(tmp_path):
    (tmp_path / "loop.s").write_text(".func main\nloop:\n    j loop\n.endfunc\n")
    assert main(["run", "--image", str(tmp_path / "loop.s"), "--fuel", "100"]) == EXIT_SIM


def test_hwcost_json(capsys):
    assert main(["hwcost", "--json", "--schemes", "FIXER,EXCEC"]) == EXIT_OK
    costs = json.loads(capsys.readouterr().out)
    assert costs["FIXER"]["policy_matrix"] == 4096 and costs["EXCEC"]["shadow_stack"] == 2304
    assert main(["hwcost", "--json", "--shadow-stack-size", "256", "--schemes", "EXCEC"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["EXCEC"]["shadow_stack"] == 4608


def test_corpus_commands(tmp_path, capsys):
    assert main(["corpus", "list"]) == EXIT_OK
    out = capsys.readouterr().out
    assert all(name in out for name in harness.CORPUS)
    assert main(["corpus", "show", "call-micro", "--param", "N=7",
                 "--cfg-out", str(tmp_path / "c.json")]) == EXIT_OK
    assert "li s0, 7" in capsys.readouterr().out
    assert json.loads((tmp_path / "c.json").read_text())["schema"] == "cfg-v1"


def test_bench_and_attack_matrix(tmp_path, capsys):
    assert main(["bench", "--schemes", "CET,EXCEC", "--programs", "factorial,leaf-math",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "report.csv").read_text().startswith("schema,bench,scheme")
    capsys.readouterr()
    assert main(["attack-matrix", "--schemes", "HAFIX,EXCEC"]) == EXIT_OK
    assert "Protected interrupts" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "cfisim", "hwcost", "--schemes", "HAFIX"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "active_set" in r.stdout
