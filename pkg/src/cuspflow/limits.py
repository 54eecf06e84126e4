"""The beta ladder, its monotone limit, barriers, and the long-time checks."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate as sp_integrate

from .conical import DEFAULT_LADDER, ConeParams, cusp_profile, psi_beta, psi_zero
from .errors import AbortedRunError, DiagnosticUnavailable, InvalidSpecError
from .flow import FlowTrace, TimeSchedule, run_flow
from .reports import CheckReport
from .solvers import NewtonConfig, density, elliptic_ke_solve, flow_rhs, forcing, stationary_residual
from .torus import BackgroundData, ddbar_density, integrate, interpolate_at, laplacian

log = logging.getLogger(__name__)

SMALL_TIMES = (1e-3, 1e-2, 0.05, 0.1)
COMPARE_TIMES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class LadderSpec:
    betas: tuple[float, ...] = DEFAULT_LADDER
    epsilons: tuple[float, ...] | None = None
    schedule: TimeSchedule = field(default_factory=TimeSchedule)
    alt_ladder: bool = False

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if not betas:
            raise InvalidSpecError("ladder needs at least one beta")
        if any(b2 >= b1 for b1, b2 in zip(betas, betas[1:])):
            raise InvalidSpecError("betas must be strictly decreasing")
        for b in betas:
            ConeParams(b)
        eps = (1e-6,) * len(betas) if self.epsilons is None else tuple(float(e) for e in self.epsilons)
        if len(eps) != len(betas):
            raise InvalidSpecError("one epsilon per beta")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "epsilons", eps)

    def params(self) -> list[ConeParams]:
        return [ConeParams(b, e) for b, e in zip(self.betas, self.epsilons)]


@dataclass
class LadderResult:
    """Per-beta traces and the monotone limit ``phi(t) = inf_beta phi_beta(t)``."""

    betas: list[float]
    epsilons: list[float]
    times: np.ndarray
    traces: list[FlowTrace | None]
    limit_fields: list[np.ndarray] = field(default_factory=list)
    gaps: np.ndarray | None = None  # shape (n_times, n_betas - 1)
    monotone: CheckReport | None = None
    complete: bool = True
    alternate: bool = False

    def fields_at(self, t: float) -> list[np.ndarray]:
        return [tr.field_at(t) for tr in self.traces]

    def limit_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-12:
            raise KeyError(f"no checkpoint at t={t}")
        return self.limit_fields[idx]

    def gap_table(self) -> list[dict]:
        rows = []
        for i, t in enumerate(self.times):
            rows.append({"t": float(t), "gaps": [float(g) for g in self.gaps[i]] if self.gaps is not None else []})
        return rows


def _member(args):
    params, schedule, bg, cfg, scale = args
    initial = None
    try:
        return run_flow(params, schedule, bg, cfg, initial=initial, background_scale=scale)[1]
    except AbortedRunError as exc:
        log.warning("member beta=%g aborted: %s", params.beta, exc)
        exc.trace.complete = False
        return exc.trace


def run_members(params_list, schedule, bg, cfg, workers=1, alternate=False):
    """Run ladder members, in parallel when ``workers > 1``, returned in input order."""
    jobs = [(p, schedule, bg, cfg, (1.0 - p.beta) if alternate else 1.0) for p in params_list]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_member, jobs))
    return [_member(j) for j in jobs]


def monotone_in_beta(field_lists, mask, tol, increasing=False) -> CheckReport:
    """Pointwise ordering of consecutive members at every shared checkpoint.

    ``field_lists[k][i]`` is member ``k`` at checkpoint ``i``; by default
    later members (smaller beta) must not exceed earlier ones.
    """
    worst = -np.inf
    worst_all = -np.inf
    for i in range(len(field_lists[0])):
        for a, b in zip(field_lists, field_lists[1:]):
            diff = (a[i] - b[i]) if increasing else (b[i] - a[i])
            worst = max(worst, float(diff[mask].max()))
            worst_all = max(worst_all, float(diff.max()))
    if len(field_lists) < 2:
        worst = worst_all = 0.0
    return CheckReport(
        "monotone_in_beta_increasing" if increasing else "monotone_in_beta", worst, tol, worst <= tol,
        details={"max_violation_all_nodes": worst_all},
    )


def run_ladder(lspec: LadderSpec, bg: BackgroundData, cfg: NewtonConfig | None = None,
               workers: int = 1) -> LadderResult:
    """Flows for every beta of the ladder, the limit fields and consecutive gaps."""
    cfg = cfg or NewtonConfig()
    params = lspec.params()
    traces = run_members(params, lspec.schedule, bg, cfg, workers)
    return assemble_ladder(lspec, traces, bg, cfg)


def assemble_ladder(lspec: LadderSpec, traces: Sequence[FlowTrace], bg: BackgroundData,
                    cfg: NewtonConfig | None = None) -> LadderResult:
    cfg = cfg or NewtonConfig()
    complete = all(tr is not None and tr.complete for tr in traces)
    n_common = min(len(tr.records) for tr in traces)
    times = traces[0].times[:n_common]
    fields = [tr.fields[:n_common] for tr in traces]
    limit = [np.min([f[i] for f in fields], axis=0) for i in range(n_common)]
    if len(traces) > 1:
        gaps = np.array([[float(np.max(np.abs(b[i] - a[i]))) for a, b in zip(fields, fields[1:])]
                         for i in range(n_common)])
    else:
        gaps = np.zeros((n_common, 0))
    mono = monotone_in_beta(fields, bg.mask, 5 * cfg.tol)
    return LadderResult(list(lspec.betas), list(lspec.epsilons), times, list(traces), limit, gaps,
                        mono, complete)


def bracketing_check(ladder: LadderResult, extra_field: np.ndarray, t: float, tol: float = 0.0) -> CheckReport:
    """A deeper member must sit inside ``[limit - last gap, limit]``."""
    i = int(np.argmin(np.abs(ladder.times - t)))
    last_gap = float(ladder.gaps[i, -1]) if ladder.gaps.shape[1] else 0.0
    diff = float(np.max(np.abs(extra_field - ladder.limit_fields[i])))
    above = float(np.max(extra_field - ladder.limit_fields[i]))
    return CheckReport("bracketing", diff, last_gap, diff <= last_gap + tol and above <= tol,
                       params={"t": t}, details={"max_above_limit": above})


def gap_sequence_check(ladder: LadderResult, t: float = 1.0, final_gap_tol: float = 1e-3) -> CheckReport:
    i = int(np.argmin(np.abs(ladder.times - t)))
    g = ladder.gaps[i]
    decreasing = bool(np.all(np.diff(g) < 0))
    final = float(g[-1]) if len(g) else 0.0
    return CheckReport("gap_sequence", final, final_gap_tol, decreasing and final < final_gap_tol,
                       params={"t": t}, details={"gaps": g.tolist(), "strictly_decreasing": decreasing})


# --- barrier ----------------------------------------------------------------------

def _s_log_s_integral(t: float) -> float:
    if t <= 0:
        return 0.0
    val, _ = sp_integrate.quad(lambda s: np.exp(s) * s * np.log(s) if s > 0 else 0.0, 0.0, t,
                               epsabs=0.0, epsrel=1e-12, limit=200)
    return float(val)


def barrier_h_of_t(t: float, u_norm: float, n: int = 1) -> float:
    """``(1 - e^t - t)|u| + n (t log t - t) e^t - n int_0^t e^s s log s ds``; zero at ``t = 0``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return 0.0
    return float((1 - np.exp(t) - t) * u_norm + n * (t * np.log(t) - t) * np.exp(t)
                 - n * _s_log_s_integral(t))


def barrier_field(t: float, params: ConeParams, bg: BackgroundData, phi_ke: np.ndarray) -> np.ndarray:
    """``H(t) = (1 - t e^-t) psi_beta + t e^-t phi_KE + h(t) e^-t``."""
    psi = psi_beta(params, bg)
    if t == 0:
        return psi
    u_norm = float(np.max(np.abs(phi_ke - psi)))
    w = t * np.exp(-t)
    return (1 - w) * psi + w * phi_ke + barrier_h_of_t(t, u_norm) * np.exp(-t)


def check_barrier_below(params: ConeParams, trace: FlowTrace, bg: BackgroundData, phi_ke: np.ndarray,
                        times: Sequence[float] = SMALL_TIMES, tol: float = 5e-10,
                        shift: float = 0.0) -> CheckReport:
    """``H(t) + shift <= phi_beta(t) + tol`` off-guard at the given checkpoints."""
    margins = {}
    worst = -np.inf
    for t in times:
        d = barrier_field(t, params, bg, phi_ke) + shift - trace.field_at(t)
        v = float(d[bg.mask].max())
        margins[float(t)] = -v
        worst = max(worst, v)
    return CheckReport("barrier_below", worst, tol, worst <= tol,
                       params={"beta": params.beta, "shift": shift}, details={"margin_by_t": margins})


# --- small time L1 -------------------------------------------------------------------

def l1_small_time(ladder: LadderResult, bg: BackgroundData, times: Sequence[float] = SMALL_TIMES) -> dict:
    """``int |phi(t) - psi0|`` of the limit at small checkpoints, guard cells counted apart.

    The floor is the value at ``t = 0`` (pure beta truncation ``psi_beta - psi0``).
    """
    spec = bg.spec
    p0 = psi_zero(bg)
    out = {"t": [], "l1": [], "guard_part": []}
    for t in sorted(times, reverse=True):
        d = np.abs(ladder.limit_at(t) - p0)
        out["t"].append(float(t))
        out["l1"].append(integrate(np.where(bg.mask, d, 0.0), spec))
        out["guard_part"].append(integrate(np.where(bg.mask, 0.0, d), spec))
    d0 = np.abs(ladder.limit_at(0.0) - p0)
    out["floor"] = integrate(np.where(bg.mask, d0, 0.0), spec)
    return out


def l1_decreasing_to_floor(series: dict) -> bool:
    """Each value (as t decreases) is below its predecessor or already at the floor."""
    l1 = series["l1"]
    return all(b <= a or b <= series["floor"] for a, b in zip(l1, l1[1:]))


# --- current sense -----------------------------------------------------------------

def current_residual(phi: np.ndarray, eta: np.ndarray, bg: BackgroundData, beta: float = 0.0,
                     epsilon: float = 0.0, t: float | None = None) -> float:
    """Gap between both sides of the flow paired with a test function ``eta``.

    Left: ``int phi' * 0.5 Lap(eta)`` with ``phi'`` the equation's right side.
    Right: ``int (-Ric - rho) eta + 2 pi (1 - beta) eta(p) + beta int theta eta``
    where ``-Ric`` has density ``0.5 Lap(log rho)``.  ``t`` is informational.
    """
    spec = bg.spec
    rho = density(phi, bg)
    f = bg.h0 + (1.0 - beta) * (bg.log_s_h_sq if epsilon == 0 else
                                np.logaddexp(2 * np.log(epsilon), bg.log_s_h_sq))
    phidot = flow_rhs(phi, f, bg, rho=rho)
    lhs = integrate(phidot * ddbar_density(eta, spec), spec)
    minus_ric = 0.5 * laplacian(np.log(rho), spec)
    rhs = integrate((minus_ric - rho) * eta, spec)
    rhs += 2 * np.pi * (1.0 - beta) * interpolate_at(eta, spec, spec.puncture)
    rhs += beta * integrate(bg.theta_dens * eta, spec)
    return float(abs(lhs - rhs))


# --- uniqueness against the alternate family ----------------------------------------

def alternate_chi(ladder: LadderResult, bg: BackgroundData) -> list[list[np.ndarray]]:
    """``phi~_beta(t) + beta log|s|^2`` per member and checkpoint."""
    return [[f + b * bg.log_s_h_sq for f in tr.fields[: len(ladder.times)]]
            for b, tr in zip(ladder.betas, ladder.traces)]


def compare_limits(lower: np.ndarray, upper: np.ndarray, mask: np.ndarray, tol: float) -> tuple[bool, float]:
    v = float((lower - upper)[mask].max())
    return v <= tol, v


def uniqueness_compare(lspec: LadderSpec, bg: BackgroundData, cfg: NewtonConfig | None = None,
                       primary: LadderResult | None = None, times: Sequence[float] = COMPARE_TIMES,
                       workers: int = 1) -> CheckReport:
    """Alternate-ladder limit ``sup_beta(phi~_beta + beta log|s|^2)`` against the primary limit."""
    cfg = cfg or NewtonConfig()
    tol = 5 * cfg.tol
    times = [t for t in times if t <= lspec.schedule.t_end + 1e-12]
    if not times:
        raise DiagnosticUnavailable("schedule ends before the first comparison time")
    t_stop = max(times)
    sched = lspec.schedule
    alt_sched = TimeSchedule(t_end=t_stop, dt0=sched.dt0, growth=sched.growth, dt_max=sched.dt_max,
                             checkpoints=tuple(c for c in sched.checkpoints if c <= t_stop))
    if primary is None:
        primary = run_ladder(LadderSpec(lspec.betas, lspec.epsilons, alt_sched), bg, cfg, workers)
    traces = run_members(lspec.params(), alt_sched, bg, cfg, workers, alternate=True)
    n_common = min(len(tr.records) for tr in traces)
    alt = LadderResult(list(lspec.betas), list(lspec.epsilons), traces[0].times[:n_common], traces,
                       alternate=True, complete=all(tr.complete for tr in traces))
    chis = alternate_chi(alt, bg)
    mono = monotone_in_beta(chis, bg.mask, tol, increasing=True)
    margins = {}
    worst = -np.inf
    for t in times:
        i = int(np.argmin(np.abs(alt.times - t)))
        if abs(alt.times[i] - t) > 1e-12:
            continue
        sup_alt = np.max([c[i] for c in chis], axis=0)
        ok, v = compare_limits(sup_alt, primary.limit_at(t), bg.mask, tol)
        margins[float(t)] = -v
        worst = max(worst, v)
    passed = bool(worst <= tol and mono.passed and alt.complete and len(margins) == len(times))
    return CheckReport("uniqueness_direction", worst, tol, passed,
                       params={"betas": list(lspec.betas)},
                       details={"margin_by_t": margins, "alternate_monotone": mono.to_dict(),
                                "alternate_complete": alt.complete})


# --- long time --------------------------------------------------------------------

def einstein_relation_error(rho: np.ndarray, bg: BackgroundData, region: np.ndarray | None = None,
                            denominator: str = "2rho") -> float:
    """Relative defect of ``Lap log rho = 2 rho``, sup over ``region`` (off-guard).

    ``denominator="2rho"`` divides by the right side of the relation,
    ``"rho"`` by the density itself (twice as large).
    """
    spec = bg.spec
    region = bg.log_s_h_sq >= np.log(0.1 * spec.delta0) if region is None else region
    scale = {"2rho": 2.0, "rho": 1.0}[denominator]
    err = np.abs(laplacian(np.log(rho), spec) - 2 * rho) / (scale * rho)
    return float(err[region & bg.mask].max())


def ke_convergence_report(phi: np.ndarray, params: ConeParams, bg: BackgroundData,
                          residual_tol: float = 1e-6, einstein_tol: float = 0.02,
                          cusp_c_max: float = 4.0) -> CheckReport:
    """Stationary residual, Einstein relation, cusp band and area of a long-time state."""
    rho = density(phi, bg)
    res = stationary_residual(phi, params, bg)
    ein = einstein_relation_error(rho, bg)
    region = (bg.log_s_h_sq >= np.log(0.1 * bg.spec.delta0)) & bg.mask
    ein_twisted = float((np.abs(0.5 * laplacian(np.log(rho), bg.spec) - rho + params.beta * bg.theta_dens)
                         / rho)[region].max())
    cusp = cusp_profile(rho, bg)
    area = integrate(rho, bg.spec)
    checks = {
        "stationary_residual": (res, residual_tol, res <= residual_tol),
        "einstein_relation": (ein, einstein_tol, ein <= einstein_tol),
        "cusp_band_C": (cusp.value, cusp_c_max, cusp.value <= cusp_c_max),
        "area_minus_2pi": (abs(area - 2 * np.pi), 1e-6, abs(area - 2 * np.pi) <= 1e-6),
    }
    return CheckReport(
        "ke_convergence", res, residual_tol, all(c[2] for c in checks.values()),
        params={"beta": params.beta, "epsilon": params.epsilon, "nx": bg.spec.nx},
        details={"checks": {k: {"value": v, "tolerance": tol, "pass": bool(p)} for k, (v, tol, p) in checks.items()},
                 "einstein_over_rho": einstein_relation_error(rho, bg, denominator="rho"),
                 "twisted_einstein_error": ein_twisted, "cusp_annuli": cusp.details["annuli"]},
    )
