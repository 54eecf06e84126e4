"""Time stepping of one twisted conical flow and the estimates measured along it."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conical import ConeParams, psi_beta
from .errors import AbortedRunError, DiagnosticUnavailable, InvalidMetricError, InvalidSpecError, NonConvergenceError
from .reports import CheckReport
from .solvers import MongeAmpereNewton, NewtonConfig, density, flow_rhs, forcing
from .torus import BackgroundData, integrate

TRACE_COLUMNS = ("t", "sup_phidot", "inf_phidot", "sup_u", "inf_u", "min_ratio", "max_ratio",
                 "area", "stat_residual", "wall_ms")

DEFAULT_CHECKPOINTS = (0.0, 1e-3, 1e-2, 0.05, 0.1, 0.25, 0.5) + tuple(float(k) for k in range(1, 21))

MIN_DT = 1e-6


@dataclass(frozen=True)
class TimeSchedule:
    t_end: float = 20.0
    dt0: float = 1e-3
    growth: float = 1.1
    dt_max: float = 0.1
    checkpoints: tuple[float, ...] = DEFAULT_CHECKPOINTS

    def __post_init__(self):
        if not self.dt0 > 0 or self.growth < 1 or self.t_end < 0 or not self.dt_max > 0:
            raise InvalidSpecError("schedule needs dt0 > 0, growth >= 1, dt_max > 0, t_end >= 0")
        cps = tuple(sorted({float(c) for c in self.checkpoints if 0 <= c <= self.t_end} | {0.0}))
        if self.t_end not in cps:
            cps = cps + (float(self.t_end),)
        object.__setattr__(self, "checkpoints", cps)


@dataclass
class FlowState:
    t: float
    phi: np.ndarray
    rho: np.ndarray
    params: ConeParams


@dataclass
class FlowTrace:
    """Checkpoint records plus the potential at every checkpoint."""

    params: ConeParams
    records: list[dict] = field(default_factory=list)
    fields: list[np.ndarray] = field(default_factory=list)
    newton: list[dict] = field(default_factory=list)
    complete: bool = True
    steps: int = 0
    rejected_steps: int = 0

    @property
    def times(self) -> np.ndarray:
        return np.array([r["t"] for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def field_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-12:
            raise KeyError(f"no checkpoint at t={t}")
        return self.fields[idx]


def _record(t, phi, params, force, psi, rho_b, bg, background_scale, wall_ms):
    rho = density(phi, bg, background_scale)
    if np.any(rho <= 0):
        raise InvalidMetricError(f"density lost positivity at t={t}")
    phidot = flow_rhs(phi, force, bg, rho=rho)
    u = phi - psi
    ratio = rho / rho_b
    inv_ratio = rho_b / rho
    return {
        "t": float(t),
        "sup_phidot": float(phidot.max()),
        "inf_phidot": float(phidot.min()),
        "sup_u": float(u.max()),
        "inf_u": float(u.min()),
        "min_ratio": float(ratio.min()),
        "max_ratio": float(ratio.max()),
        "min_inv_ratio": float(inv_ratio.min()),
        "max_inv_ratio": float(inv_ratio.max()),
        "area": integrate(rho, bg.spec),
        "stat_residual": float(np.max(np.abs(phidot[bg.mask]))),
        "wall_ms": float(wall_ms),
    }


def run_flow(params: ConeParams, schedule: TimeSchedule, bg: BackgroundData,
             cfg: NewtonConfig | None = None, *, initial=None, background_scale: float = 1.0,
             force=None, on_checkpoint: Callable[[FlowTrace], None] | None = None):
    """Backward Euler integration of ``phi' = log(rho/rho0) - phi + f`` from ``psi_beta``.

    The step grows geometrically up to ``dt_max`` and is shortened to land on
    each checkpoint; a failed Newton solve halves the step (floor ``1e-6``).
    ``background_scale`` and ``initial`` serve the alternate family whose
    background is ``(1 - beta) omega0``.
    Returns ``(FlowState, FlowTrace)``.
    """
    cfg = cfg or NewtonConfig()
    psi = psi_beta(params, bg)
    phi = psi.copy() if initial is None else np.array(initial, dtype=float)
    force = forcing(params, bg) if force is None else force
    rho_b = density(phi, bg, background_scale)
    if np.any(rho_b <= 0):
        raise InvalidMetricError("initial density is not positive")
    solver = MongeAmpereNewton(bg, force, cfg, background_scale)
    trace = FlowTrace(params=params)
    start = time.perf_counter()

    def snap(t):
        trace.records.append(_record(t, phi, params, force, psi, rho_b, bg, background_scale,
                                     1e3 * (time.perf_counter() - start)))
        trace.fields.append(phi.copy())
        if on_checkpoint is not None:
            on_checkpoint(trace)

    t = 0.0
    dt = schedule.dt0
    snap(0.0)
    for target in schedule.checkpoints[1:]:
        while t < target:
            remaining = target - t
            full = dt < remaining * (1 - 1e-12)
            step = dt if full else remaining
            try:
                phi_new, rep = solver.solve(phi, phi_prev=phi, c=1.0 / step)
            except NonConvergenceError as exc:
                trace.rejected_steps += 1
                dt = 0.5 * step
                if dt < MIN_DT:
                    trace.complete = False
                    state = FlowState(t, phi, density(phi, bg, background_scale), params)
                    raise AbortedRunError(f"flow aborted at t={t:.6g}: {exc}", trace, state) from exc
                continue
            phi = phi_new
            trace.steps += 1
            trace.newton.append({"t": t + step, "dt": step, "iterations": rep.iterations,
                                 "cg": rep.cg_iterations, "residual": rep.residual})
            t = target if not full else t + step
            if full:
                dt = min(dt * schedule.growth, schedule.dt_max)
        snap(target)
    state = FlowState(t, phi, density(phi, bg, background_scale), params)
    return state, trace


def linf_bound_u(trace: FlowTrace) -> float:
    """``sup_t ||phi(t) - psi_beta||_inf`` over the checkpoints."""
    if not trace.records:
        raise DiagnosticUnavailable("empty trace")
    return float(max(max(abs(r["sup_u"]), abs(r["inf_u"])) for r in trace.records))


def _positive_times(trace, t_max):
    recs = [r for r in trace.records if r["t"] > 0 and (t_max is None or r["t"] <= t_max + 1e-12)]
    if not recs:
        raise DiagnosticUnavailable("trace has no checkpoint with t > 0")
    return recs


def volume_ratio_bounds(trace: FlowTrace, t_max: float | None = None) -> CheckReport:
    """Smallest ``C_low, C_up`` with ``t/C_low <= rho/rho_beta <= exp(C_up/t)`` on the checkpoints."""
    recs = _positive_times(trace, t_max)
    c_low = max(r["t"] / r["min_ratio"] for r in recs)
    c_up = max(0.0, max(r["t"] * np.log(r["max_ratio"]) for r in recs))
    return CheckReport(
        "volume_ratio_bounds", float(max(c_low, c_up)), None, bool(np.isfinite(c_low) and np.isfinite(c_up)),
        params={"beta": trace.params.beta, "t_max": t_max},
        details={"C_low": float(c_low), "C_up": float(c_up)},
    )


def metric_equivalence_bounds(trace: FlowTrace, t_max: float | None = None) -> CheckReport:
    """Smallest ``C`` with ``exp(-C/t) omega_beta <= omega(t) <= exp(C/t) omega_beta``.

    In complex dimension one the trace ratios ``tr_{omega_beta} omega(t)`` and
    ``tr_{omega(t)} omega_beta`` are the density ratio and its reciprocal; the
    second is read from its own record column and compared with the first.
    """
    recs = _positive_times(trace, t_max)
    c_up = max(r["t"] * np.log(r["max_ratio"]) for r in recs)
    c_down = max(r["t"] * np.log(r["max_inv_ratio"]) for r in recs)
    c = max(0.0, c_up, c_down)
    consistency = max(
        max(abs(np.log(r["max_inv_ratio"]) + np.log(r["min_ratio"])),
            abs(np.log(r["min_inv_ratio"]) + np.log(r["max_ratio"])))
        for r in recs
    )
    return CheckReport(
        "metric_equivalence_bounds", float(c), None, bool(np.isfinite(c)),
        params={"beta": trace.params.beta, "t_max": t_max},
        details={"C_up": float(c_up), "C_down": float(c_down), "volume_metric_consistency": float(consistency)},
    )


def decay_rate_fit(trace: FlowTrace, t_min: float, t_max: float) -> tuple[float, float]:
    """Least-squares line through ``log sup|phi'|`` on ``[t_min, t_max]``; returns ``(rate, amplitude)``."""
    t = trace.times
    sup = np.maximum(np.abs(trace.column("sup_phidot")), np.abs(trace.column("inf_phidot")))
    sel = (t >= t_min - 1e-12) & (t <= t_max + 1e-12)
    if sel.sum() < 5 or np.any(sup[sel] <= 0):
        raise DiagnosticUnavailable("need >= 5 checkpoints with sup|phi'| > 0 in the window")
    slope, intercept = np.polyfit(t[sel], np.log(sup[sel]), 1)
    return float(slope), float(np.exp(intercept))


def trace_from_columns(params: ConeParams, rows: Sequence[dict]) -> FlowTrace:
    """Rebuild a trace (records only) from CSV rows."""
    tr = FlowTrace(params=params)
    for r in rows:
        rec = {k: float(r[k]) for k in TRACE_COLUMNS}
        rec["min_inv_ratio"] = 1.0 / rec["max_ratio"]
        rec["max_inv_ratio"] = 1.0 / rec["min_ratio"]
        tr.records.append(rec)
    return tr
