import json

import numpy as np
import pytest

from cuspflow import io
from cuspflow.conical import ConeParams
from cuspflow.config import THREADS_ENV, config_from_dict, load_config
from cuspflow.errors import InvalidSpecError, MissingArtifactError
from cuspflow.flow import TRACE_COLUMNS, TimeSchedule, run_flow
from cuspflow.torus import TorusSpec


def test_field_dump_layout(tmp_path):
    spec = TorusSpec(nx=16, ny=32)
    f = np.arange(16 * 32, dtype=float).reshape(32, 16)
    io.write_field(tmp_path / "f.f64", f, spec, "test", 0.5)
    raw = (tmp_path / "f.f64").read_bytes()
    assert len(raw) == 8 * 16 * 32
    # little endian, y outer: the second value is row 0, column 1
    assert np.frombuffer(raw[8:16], "<f8")[0] == 1.0
    back, meta = io.read_field(tmp_path / "f.f64")
    assert np.array_equal(back, f)
    assert meta == {"nx": 16, "ny": 32, "tau_re": 0.0, "tau_im": 1.0, "offset": 0.5, "field_name": "test",
                    "time": 0.5}


def test_field_shape_mismatch(tmp_path):
    with pytest.raises(ValueError):
        io.write_field(tmp_path / "f.f64", np.zeros((4, 4)), TorusSpec(nx=16, ny=16), "x")


def test_trace_csv_round_trip(tmp_path, bg32):
    _, tr = run_flow(ConeParams(0.5), TimeSchedule(t_end=0.1), bg32)
    p = io.write_trace_csv(tmp_path / "trace_beta1.csv", tr)
    assert p.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)
    rows = io.read_trace_csv(p)
    assert len(rows) == len(tr.records)
    for r, rec in zip(rows, tr.records):
        assert all(r[c] == rec[c] for c in TRACE_COLUMNS)


def test_require_lists_missing(tmp_path):
    (tmp_path / "a").write_text("x")
    with pytest.raises(MissingArtifactError) as exc:
        io.require([tmp_path / "a", tmp_path / "b", tmp_path / "c"])
    assert exc.value.missing == [str(tmp_path / "b"), str(tmp_path / "c")]


def test_run_directory_indexes_and_finalizes(tmp_path):
    rd = io.RunDirectory(tmp_path / "run")
    rd.json("a.json", {"x": np.float64(1.5)})
    rd.text("b.txt", "hi")
    man = rd.finalize({"k": 1})
    data = json.loads(man.read_text())
    assert data["file_index"] == ["a.json", "b.txt"]
    assert not list((tmp_path / "run").glob(".*"))  # no temp files left


def test_svg_plot_is_well_formed():
    import xml.etree.ElementTree as ET

    svg = io.svg_line_plot([("a", [0, 1, 2], [1, 10, 100]), ("b", [0, 1], [5, 5])], title="t", logy=True)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("polyline")]) == 2


def test_config_defaults():
    cfg = config_from_dict({})
    assert cfg.torus == TorusSpec()
    assert cfg.ladder.betas == tuple(2.0**-k for k in range(1, 8))
    assert cfg.schedule.t_end == 20.0
    snap = cfg.snapshot()
    assert config_from_dict(snap).snapshot() == snap


@pytest.mark.parametrize("bad", [
    {"torus": {"nx": 33}},
    {"torus": {"tau_im": -1}},
    {"ladder": {"betas": [0.25, 0.5]}},
    {"ladder": {"betas": [0.7]}},
    {"schedule": {"dt0": 0}},
    {"newton": {"tol": -1}},
    {"newton": {"bogus": 1}},
    {"threads": -1},
    {"extra": 1},
    {"torus": "nope"},
    [],
])
def test_config_rejections(bad):
    with pytest.raises(InvalidSpecError):
        config_from_dict(bad)


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(InvalidSpecError):
        load_config(p)
    with pytest.raises(InvalidSpecError):
        load_config(tmp_path / "missing.json")


def test_thread_override(monkeypatch):
    cfg = config_from_dict({"threads": 3})
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert cfg.worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, "2")
    assert cfg.worker_count() == 2
    monkeypatch.setenv(THREADS_ENV, "x")
    with pytest.raises(InvalidSpecError):
        cfg.worker_count()
