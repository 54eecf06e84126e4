"""``cuspflow`` command-line front end.

Exit codes: 0 all checks pass, 2 a property check failed, 3 a solver did not
converge (or the run was interrupted), 4 invalid configuration or missing inputs.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import signal
import sys
import time
from contextlib import contextmanager
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import io, suite
from .conical import ConeParams, psi_beta
from .config import RunConfig, load_config
from .errors import AbortedRunError, CuspFlowError, InvalidSpecError, MissingArtifactError, NonConvergenceError
from .flow import TRACE_COLUMNS, FlowTrace, TimeSchedule, decay_rate_fit, linf_bound_u, \
    metric_equivalence_bounds, run_flow, trace_from_columns, volume_ratio_bounds
from .limits import LadderSpec, assemble_ladder, ke_convergence_report, run_members, uniqueness_compare
from .reports import CheckReport
from .solvers import elliptic_ke_solve
from .torus import build_background

log = logging.getLogger("cuspflow")

EXIT_OK, EXIT_PROPERTY, EXIT_NONCONVERGENCE, EXIT_CONFIG = 0, 2, 3, 4


def software_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class Interrupted(Exception):
    pass


@contextmanager
def _interruptible():
    """Turn SIGINT/SIGTERM into :class:`Interrupted` so partial output can be flushed."""
    def handler(signum, frame):
        raise Interrupted(signal.Signals(signum).name)

    old = {s: signal.signal(s, handler) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        yield
    finally:
        for s, h in old.items():
            signal.signal(s, h)


class Stage:
    """Collects reports and timings for one command and writes its manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = io.RunDirectory(out)
        self.reports: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self.complete = True
        self._t0 = time.perf_counter()

    def add(self, key: str, rep: CheckReport) -> CheckReport:
        self.reports[key] = rep.to_dict()
        return rep

    @contextmanager
    def timed(self, key):
        t = time.perf_counter()
        yield
        self.timings[key] = time.perf_counter() - t

    @property
    def summary(self) -> dict[str, bool]:
        return {k: bool(r["pass"]) for k, r in self.reports.items()}

    def exit_code(self) -> int:
        if not self.complete:
            return EXIT_NONCONVERGENCE
        return EXIT_OK if all(self.summary.values()) else EXIT_PROPERTY

    def finalize(self, extra: dict | None = None) -> Path:
        self.timings["total"] = time.perf_counter() - self._t0
        man = {"command": self.command, "config": self.cfg.snapshot(), "config_raw": self.cfg.raw,
               "software_version": software_version(), "reports": self.reports, "timings": self.timings,
               "summary": self.summary, "complete": self.complete}
        man.update(extra or {})
        return self.out.finalize(man, f"manifest_{self.command.replace('-', '_')}.json")


def _params(cfg: RunConfig, k: int) -> ConeParams:
    betas = cfg.ladder.betas
    if not 1 <= k <= len(betas):
        raise InvalidSpecError(f"beta index {k} outside 1..{len(betas)}")
    return ConeParams(betas[k - 1], cfg.ladder.epsilons[k - 1])


def _flow_reports(stage: Stage, trace: FlowTrace, k: int) -> None:
    stage.add(f"u_bound_b{k}", CheckReport("u_bound", linf_bound_u(trace), None, True))
    if len(trace.records) > 1:
        stage.add(f"volume_ratio_b{k}", volume_ratio_bounds(trace))
        stage.add(f"metric_equivalence_b{k}", metric_equivalence_bounds(trace))
    area = float(np.abs(trace.column("area") - 2 * np.pi).max())
    stage.add(f"area_b{k}", CheckReport("area_conservation", area, suite.AREA_TOL, area <= suite.AREA_TOL))
    res = float(trace.records[-1]["stat_residual"])
    t_end = float(trace.times[-1])
    if t_end >= 20.0 - 1e-12:
        stage.add(f"stationary_residual_b{k}", CheckReport("stationary_residual", res, 1e-6, res <= 1e-6,
                                                            params={"t": t_end}))
    else:
        stage.reports[f"final_residual_b{k}"] = {"check": "stationary_residual", "value": res, "pass": True,
                                                 "tolerance": None, "params": {"t": t_end}, "details": {}}
    try:
        rate, amp = decay_rate_fit(trace, 2.0, 10.0)
        stage.add(f"decay_rate_b{k}", CheckReport("decay_rate", rate, 0.15, -1.15 <= rate <= -0.85,
                                                  details={"amplitude": amp}))
    except CuspFlowError:
        pass


# --- commands --------------------------------------------------------------------

def cmd_setup_check(cfg: RunConfig, out: Path, **_) -> int:
    stage = Stage("setup-check", cfg, out)
    with stage.timed("geometry"):
        for k, r in suite.geometry_checks(cfg.torus).items():
            stage.add(k, r)
    with stage.timed("conical"):
        for k, r in suite.conical_checks(cfg.ladder.betas, cfg.torus).items():
            stage.add(k, r)
    stage.out.json("setup_report.json", {"reports": stage.reports, "summary": stage.summary})
    stage.finalize()
    return stage.exit_code()


def cmd_flow(cfg: RunConfig, out: Path, beta_index: int = 1, **_) -> int:
    stage = Stage("flow", cfg, out)
    bg = build_background(cfg.torus)
    partial = {}

    def keep(trace):
        partial["trace"] = trace
        io.write_trace_csv(io.trace_path(stage.out.root, beta_index), trace)

    params = _params(cfg, beta_index)
    try:
        with _interruptible(), stage.timed("flow"):
            _, trace = run_flow(params, cfg.schedule, bg, cfg.newton, on_checkpoint=keep)
    except (Interrupted, AbortedRunError) as exc:
        trace = getattr(exc, "trace", None) or partial.get("trace")
        stage.complete = False
        if trace is not None:
            stage.out.trace(beta_index, trace, cfg.torus)
        stage.finalize({"beta_index": beta_index, "interrupted": isinstance(exc, Interrupted),
                        "error": str(exc)})
        log.error("flow incomplete: %s", exc)
        return EXIT_NONCONVERGENCE
    stage.out.trace(beta_index, trace, cfg.torus)
    _flow_reports(stage, trace, beta_index)
    stage.out.json(f"flow_report_b{beta_index}.json",
                   {"params": {"beta": params.beta, "epsilon": params.epsilon}, "reports": stage.reports,
                    "steps": trace.steps, "rejected_steps": trace.rejected_steps, "newton": trace.newton})
    stage.finalize({"beta_index": beta_index})
    return stage.exit_code()


def _ladder_manifest(ladder, files) -> dict:
    return {"betas": ladder.betas, "epsilons": ladder.epsilons, "checkpoints": ladder.times.tolist(),
            "gap_table": ladder.gap_table(), "complete": ladder.complete, "file_index": sorted(files)}


def cmd_ladder(cfg: RunConfig, out: Path, **_) -> int:
    stage = Stage("ladder", cfg, out)
    bg = build_background(cfg.torus)
    workers = cfg.worker_count()
    params = cfg.ladder.params()
    with _interruptible():
        try:
            with stage.timed("members"):
                traces = run_members(params, cfg.schedule, bg, cfg.newton, workers)
        except Interrupted as exc:
            stage.complete = False
            stage.finalize({"interrupted": True, "error": str(exc)})
            return EXIT_NONCONVERGENCE
    for k, tr in enumerate(traces, 1):
        stage.out.trace(k, tr, cfg.torus)
        if not tr.complete:
            stage.complete = False
    ladder = assemble_ladder(cfg.ladder, traces, bg, cfg.newton)
    for k, r in suite.ladder_checks(ladder).items():
        stage.add(k, r)
    for k, r in suite.flow_estimate_checks(traces).items():
        stage.add(k, r)
    if cfg.ladder.alt_ladder:
        with stage.timed("alternate"):
            stage.add("uniqueness_direction", uniqueness_compare(cfg.ladder, bg, cfg.newton, primary=ladder,
                                                                 workers=workers))
    stage.out.json("ladder.json", _ladder_manifest(ladder, stage.out.files))
    stage.finalize()
    return stage.exit_code()


def cmd_ke(cfg: RunConfig, out: Path, beta_index: int = 1, **_) -> int:
    """Elliptic solve from a cold start (zero) and a warm start (``psi_beta``)."""
    stage = Stage("ke", cfg, out)
    bg = build_background(cfg.torus)
    params = _params(cfg, beta_index)
    with stage.timed("cold"):
        cold, rep_cold = elliptic_ke_solve(params, bg, cfg.newton, init=np.zeros(cfg.torus.shape))
    with stage.timed("warm"):
        warm, rep_warm = elliptic_ke_solve(params, bg, cfg.newton, init=psi_beta(params, bg))
    diff = float(np.abs(cold - warm).max())
    tol = 10 * cfg.newton.tol
    stage.add("cold_vs_warm", CheckReport(
        "cold_vs_warm", diff, tol, diff <= tol and rep_warm.iterations <= rep_cold.iterations,
        params={"beta": params.beta},
        details={"cold_iterations": rep_cold.iterations, "warm_iterations": rep_warm.iterations}))
    stage.add("ke_convergence", ke_convergence_report(warm, params, bg))
    stage.out.field(f"ke_b{beta_index}.f64", warm, cfg.torus, "phi_ke")
    stage.out.json("ke_report.json", {"cold": rep_cold.to_dict(), "warm": rep_warm.to_dict(),
                                      "reports": stage.reports})
    stage.finalize({"beta_index": beta_index})
    return stage.exit_code()


def load_trace(root: Path, k: int, params: ConeParams, prefix: str = "phi", csv_name: str | None = None,
               with_fields: bool = True) -> FlowTrace:
    path = root / (csv_name or io.trace_path(root, k).name)
    io.require([path])
    tr = trace_from_columns(params, io.read_trace_csv(path))
    if with_fields:
        paths = [io.field_path(root, k, i, prefix) for i in range(len(tr.records))]
        io.require(paths)
        tr.fields = [io.read_field(p)[0] for p in paths]
    return tr


def csv_digest(path, exclude=("wall_ms",)) -> str:
    """SHA-256 of the CSV's numeric columns other than ``exclude``."""
    rows = Path(path).read_text().splitlines()
    header = rows[0].split(",")
    keep = [i for i, c in enumerate(header) if c not in exclude]
    h = hashlib.sha256()
    for line in rows:
        cells = line.split(",")
        h.update((",".join(cells[i] for i in keep) + "\n").encode())
    return h.hexdigest()


def cmd_verify(cfg: RunConfig, out: Path, **_) -> int:
    """Full property suite over a completed ladder run in ``out``."""
    root = Path(out)
    params = cfg.ladder.params()
    expected = [io.trace_path(root, k) for k in range(1, len(params) + 1)]
    io.require(expected)
    traces = [load_trace(root, k, p) for k, p in enumerate(params, 1)]
    stage = Stage("verify", cfg, root)
    bg = build_background(cfg.torus)
    spec, newton = cfg.torus, cfg.newton
    rows = {}
    with stage.timed("geometry"):
        rows.update(suite.geometry_checks(spec))
        rows.update(suite.conical_checks(cfg.ladder.betas, spec))
    with stage.timed("solvers"):
        p1 = params[0]
        rows["jacobian_fd"] = suite.jacobian_check(p1, bg)
        rows["step_halving"] = suite.step_halving_check(p1, bg, newton)
        rows["ke_multistart"] = suite.multistart_check(p1, bg, newton)
        kes = [elliptic_ke_solve(p, bg, newton)[0] for p in params]
        if traces[0].times[-1] >= 20.0 - 1e-12:
            rows["flow_vs_elliptic"] = suite.flow_vs_elliptic(traces[0], kes[0])
    rows.update(suite.flow_estimate_checks(traces))
    ladder = assemble_ladder(cfg.ladder, traces, bg, newton)
    rows.update(suite.ladder_checks(ladder))
    rows["barrier"] = suite.barrier_checks(ladder, bg, kes, newton)
    with stage.timed("deeper_member"):
        deep_beta = cfg.ladder.betas[-1] / 2
        short = TimeSchedule(t_end=0.1, dt0=cfg.schedule.dt0, growth=cfg.schedule.growth,
                             dt_max=cfg.schedule.dt_max, checkpoints=cfg.schedule.checkpoints)
        extra = run_members([ConeParams(deep_beta, cfg.ladder.epsilons[-1])], short, bg, newton)[0]
        deep_spec = LadderSpec(cfg.ladder.betas + (deep_beta,), cfg.ladder.epsilons + (cfg.ladder.epsilons[-1],),
                               short)
        deeper = assemble_ladder(deep_spec, traces + [extra], bg, newton)
        rows["l1_small_time"] = suite.small_time_checks(ladder, deeper, bg)
    with stage.timed("alternate"):
        rows["uniqueness_direction"] = uniqueness_compare(cfg.ladder, bg, newton, primary=ladder,
                                                          workers=cfg.worker_count())
    deepest = traces[-1]
    if deepest.times[-1] >= 20.0 - 1e-12:
        rows.update(suite.long_time_checks(deepest, bg))
        rows.update(suite.einstein_checks(deepest.fields[-1], deepest.params, bg))
    with stage.timed("determinism"):
        rerun = run_members([params[0]], cfg.schedule, bg, newton)[0]
        tmp = root / ".verify_rerun.csv"
        io.write_trace_csv(tmp, rerun)
        same = csv_digest(tmp) == csv_digest(expected[0])
        tmp.unlink()
        rows["determinism"] = CheckReport("determinism", float(same), 1.0, same,
                                          details={"excluded_columns": ["wall_ms"]})
    for k, r in rows.items():
        stage.add(k, r)
    matrix = [{"check": k, "value": float(r.value), "pass": bool(r.passed),
               "tolerance": None if r.tolerance is None else float(r.tolerance)} for k, r in rows.items()]
    stage.out.json("verify_matrix.json", matrix)
    lines = ["check,value,tolerance,pass"] + [f"{m['check']},{m['value']!r},{m['tolerance']!r},{m['pass']}"
                                              for m in matrix]
    stage.out.text("verify_matrix.csv", "\n".join(lines) + "\n")
    stage.finalize()
    return stage.exit_code()


def cmd_report(cfg: RunConfig, out: Path, **_) -> int:
    """``summary.csv`` and one SVG per trace column (plus the gap table) from a run directory."""
    root = Path(out)
    params = cfg.ladder.params()
    io.require([io.trace_path(root, k) for k in range(1, len(params) + 1)])
    traces = [load_trace(root, k, p, with_fields=False) for k, p in enumerate(params, 1)]
    stage = Stage("report", cfg, root)
    head = ["beta", "t_end", "u_bound", "C_low", "C_up", "metric_C", "final_stat_residual", "decay_rate",
            "max_area_error"]
    lines = [",".join(head)]
    for tr in traces:
        vol = volume_ratio_bounds(tr) if len(tr.records) > 1 else None
        met = metric_equivalence_bounds(tr) if len(tr.records) > 1 else None
        try:
            rate = decay_rate_fit(tr, 2.0, 10.0)[0]
        except CuspFlowError:
            rate = float("nan")
        vals = [tr.params.beta, tr.times[-1], linf_bound_u(tr),
                vol.details["C_low"] if vol else float("nan"), vol.details["C_up"] if vol else float("nan"),
                met.value if met else float("nan"), tr.records[-1]["stat_residual"], rate,
                float(np.abs(tr.column("area") - 2 * np.pi).max())]
        lines.append(",".join(repr(float(v)) for v in vals))
    stage.out.text("summary.csv", "\n".join(lines) + "\n")
    logy = {"sup_phidot", "inf_phidot", "stat_residual", "max_ratio", "min_ratio", "wall_ms"}
    for col in TRACE_COLUMNS[1:]:
        series = []
        for tr in traces:
            y = tr.column(col)
            if col in logy:
                y = np.abs(y)
            series.append((f"beta={tr.params.beta:g}", tr.times, y))
        stage.out.text(f"plot_{col}.svg", io.svg_line_plot(series, title=col, ylabel=col, logy=col in logy))
    lad = root / "ladder.json"
    if lad.exists():
        gt = io.read_json(lad)["gap_table"]
        t = [r["t"] for r in gt]
        n_gaps = len(gt[0]["gaps"]) if gt else 0
        series = [(f"gap {j + 1}", t, [r["gaps"][j] for r in gt]) for j in range(n_gaps)]
        stage.out.text("plot_gaps.svg", io.svg_line_plot(series, title="consecutive ladder gaps",
                                                         ylabel="sup gap", logy=True))
    stage.finalize()
    return stage.exit_code()


COMMANDS = {"setup-check": cmd_setup_check, "flow": cmd_flow, "ladder": cmd_ladder, "ke": cmd_ke,
            "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cuspflow", description="Twisted conical flows on a punctured torus.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--beta-index", type=int, default=1, help="1-based ladder member (flow, ke)")
    ap.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.output_dir)
        code = COMMANDS[args.command](cfg, out, beta_index=args.beta_index)
    except (InvalidSpecError, MissingArtifactError, PermissionError) as exc:
        print(f"cuspflow: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, AbortedRunError) as exc:
        print(f"cuspflow: solver failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except CuspFlowError as exc:
        print(f"cuspflow: property failure: {exc}", file=sys.stderr)
        return EXIT_PROPERTY
    print(f"cuspflow {args.command}: exit {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
