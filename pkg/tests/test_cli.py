import json
import os
import signal
import subprocess
import sys
import time

import pytest

from cuspflow import cli

SMALL = {"torus": {"nx": 32, "ny": 32}, "ladder": {"betas": [0.5, 0.25]}, "schedule": {"t_end": 0.5}}


def _cfg(tmp_path, extra=None, name="cfg.json"):
    d = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        d.setdefault(k, {})
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    d["output_dir"] = str(tmp_path / "run")
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def test_setup_check_default_grid(tmp_path):
    assert cli.main(["setup-check", "--config", str(_cfg(tmp_path, {"torus": {"nx": 128, "ny": 128}}))]) == 0
    rep = json.loads((tmp_path / "run" / "setup_report.json").read_text())
    assert rep["reports"]["theta_integral"]["details"]["integral"] == pytest.approx(2 * 3.141592653589793, abs=1e-9)
    man = json.loads((tmp_path / "run" / "manifest_setup_check.json").read_text())
    assert "setup_report.json" in man["file_index"] and man["complete"]


def test_setup_check_domination_failure(tmp_path):
    code = cli.main(["setup-check", "--config", str(_cfg(tmp_path, {"torus": {"delta0": 0.99}}))])
    assert code == cli.EXIT_PROPERTY
    rep = json.loads((tmp_path / "run" / "setup_report.json").read_text())
    assert rep["summary"]["domination"] is False


def test_odd_grid_rejected(tmp_path, capsys):
    assert cli.main(["setup-check", "--config", str(_cfg(tmp_path, {"torus": {"nx": 33}}))]) == cli.EXIT_CONFIG
    assert "even integer" in capsys.readouterr().err


def test_bad_beta_index(tmp_path):
    assert cli.main(["flow", "--config", str(_cfg(tmp_path)), "--beta-index", "9"]) == cli.EXIT_CONFIG


def test_flow_zero_length(tmp_path):
    cfg = _cfg(tmp_path, {"schedule": {"t_end": 0.0}})
    assert cli.main(["flow", "--config", str(cfg)]) == 0
    lines = (tmp_path / "run" / "trace_beta1.csv").read_text().splitlines()
    assert len(lines) == 2
    assert (tmp_path / "run" / "phi_b1_t0.f64").exists() and (tmp_path / "run" / "phi_b1_t0.f64.json").exists()


def test_flow_nonconvergence_exit_code(tmp_path):
    cfg = _cfg(tmp_path, {"newton": {"max_iter": 1}})
    assert cli.main(["flow", "--config", str(cfg)]) == cli.EXIT_NONCONVERGENCE
    man = json.loads((tmp_path / "run" / "manifest_flow.json").read_text())
    assert man["complete"] is False and man["interrupted"] is False


def test_report_on_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = cli.main(["report", "--config", str(_cfg(tmp_path)), "--out", str(tmp_path / "empty")])
    assert code == cli.EXIT_CONFIG
    assert "trace_beta1.csv" in capsys.readouterr().err


def test_ladder_then_report(tmp_path):
    cfg = str(_cfg(tmp_path))
    # two members cannot close the gap to 1e-3: a property failure, not a crash
    assert cli.main(["ladder", "--config", cfg]) == cli.EXIT_PROPERTY
    run = tmp_path / "run"
    lad = json.loads((run / "ladder.json").read_text())
    assert lad["betas"] == [0.5, 0.25] and len(lad["gap_table"]) == len(lad["checkpoints"])
    assert cli.main(["report", "--config", cfg]) == 0
    assert (run / "summary.csv").exists() and (run / "plot_gaps.svg").exists()
    assert len(list(run.glob("plot_*.svg"))) == 10
    man = json.loads((run / "manifest_report.json").read_text())
    assert "summary.csv" in man["file_index"]


def test_ke_cold_vs_warm(tmp_path):
    assert cli.main(["ke", "--config", str(_cfg(tmp_path, {"torus": {"nx": 64, "ny": 64}}))]) in (0, 2)
    rep = json.loads((tmp_path / "run" / "ke_report.json").read_text())
    cw = rep["reports"]["cold_vs_warm"]
    assert cw["pass"], cw
    assert cw["details"]["warm_iterations"] < cw["details"]["cold_iterations"]


def _digests(run):
    return {p.name: cli.csv_digest(p) for p in sorted(run.glob("trace_beta*.csv"))}


def test_determinism_across_runs_and_threads(tmp_path):
    digests = []
    for i, threads in enumerate(("1", "2", "1")):
        cfg = _cfg(tmp_path, {"output_dir": str(tmp_path / f"r{i}")}, name=f"c{i}.json")
        env = dict(os.environ, CUSPFLOW_THREADS=threads)
        subprocess.run([sys.executable, "-m", "cuspflow.cli", "ladder", "--config", str(cfg),
                        "--out", str(tmp_path / f"r{i}")], env=env, check=False, capture_output=True)
        digests.append(_digests(tmp_path / f"r{i}"))
    assert digests[0] and digests[0] == digests[1] == digests[2]


def test_interrupted_flow_flushes_partial_trace(tmp_path):
    cfg = _cfg(tmp_path, {"torus": {"nx": 128, "ny": 128}, "schedule": {"t_end": 20.0}})
    proc = subprocess.Popen([sys.executable, "-m", "cuspflow.cli", "flow", "--config", str(cfg)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    trace = tmp_path / "run" / "trace_beta1.csv"
    deadline = time.time() + 60
    while time.time() < deadline and not (trace.exists() and len(trace.read_text().splitlines()) > 3):
        time.sleep(0.05)
    proc.send_signal(signal.SIGINT)
    proc.wait(timeout=60)
    assert proc.returncode == cli.EXIT_NONCONVERGENCE
    man = json.loads((tmp_path / "run" / "manifest_flow.json").read_text())
    assert man["complete"] is False and man["interrupted"] is True
    rows = trace.read_text().splitlines()
    assert 3 < len(rows) < 28
    assert "trace_beta1.csv" in man["file_index"]
