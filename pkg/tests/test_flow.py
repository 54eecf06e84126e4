import numpy as np
import pytest

from cuspflow.conical import ConeParams, psi_beta
from cuspflow.errors import AbortedRunError, DiagnosticUnavailable, InvalidSpecError, NonConvergenceError
from cuspflow.flow import (DEFAULT_CHECKPOINTS, TRACE_COLUMNS, FlowTrace, TimeSchedule, decay_rate_fit,
                           linf_bound_u, metric_equivalence_bounds, run_flow, trace_from_columns,
                           volume_ratio_bounds)
from cuspflow.solvers import MongeAmpereNewton, density, flow_rhs, forcing
from cuspflow.torus import TorusSpec, build_background

SHORT = TimeSchedule(t_end=1.0)


@pytest.fixture(scope="module")
def short_half(bg64):
    return run_flow(ConeParams(0.5), SHORT, bg64)


@pytest.fixture(scope="module")
def long_half_64(bg64):
    return run_flow(ConeParams(0.5), TimeSchedule(), bg64)


def test_schedule_validation():
    with pytest.raises(InvalidSpecError):
        TimeSchedule(dt0=0.0)
    with pytest.raises(InvalidSpecError):
        TimeSchedule(growth=0.9)
    s = TimeSchedule(t_end=0.3, checkpoints=(0.1, 5.0, 0.05))
    assert s.checkpoints == (0.0, 0.05, 0.1, 0.3)
    assert TimeSchedule().checkpoints == DEFAULT_CHECKPOINTS


def test_zero_length_flow(bg64):
    p = ConeParams(0.5)
    state, trace = run_flow(p, TimeSchedule(t_end=0.0), bg64)
    assert len(trace.records) == 1
    assert np.array_equal(state.phi, psi_beta(p, bg64))
    r = trace.records[0]
    assert r["sup_u"] == 0.0 and r["inf_u"] == 0.0
    assert r["min_ratio"] == 1.0 and r["max_ratio"] == 1.0
    assert linf_bound_u(trace) == 0.0


def test_checkpoints_hit_exactly(short_half):
    _, trace = short_half
    assert tuple(trace.times) == SHORT.checkpoints
    assert np.all(np.diff(trace.times) > 0)
    for r in trace.records:
        assert all(np.isfinite(r[c]) for c in TRACE_COLUMNS)


def test_area_conserved(short_half):
    _, trace = short_half
    assert np.abs(trace.column("area") - 2 * np.pi).max() <= 1e-6


def test_phidot_consistent_with_backward_difference(bg64):
    p = ConeParams(0.5)
    force = forcing(p, bg64)
    phi = psi_beta(p, bg64)
    solver = MongeAmpereNewton(bg64, force)
    errs = []
    for dt in (1e-2, 5e-3):
        nxt, _ = solver.solve(phi, phi_prev=phi, c=1 / dt)
        # backward Euler makes the equation's right side at t+dt exactly the difference quotient
        errs.append(np.abs(flow_rhs(nxt, force, bg64) - (nxt - phi) / dt).max())
    assert max(errs) < 1e-7


def test_u_bound_saturates_exponentially(long_half_64, bg64):
    # u tends to phi_KE - psi_beta, not to zero: the sup norm levels off
    _, trace = long_half_64
    u = np.maximum(np.abs(trace.column("sup_u")), np.abs(trace.column("inf_u")))
    t = trace.times
    late = (t >= 10)
    assert u[late].max() - u[late].min() < 1e-3 * u.max()
    assert linf_bound_u(trace) == pytest.approx(u.max())


def test_long_flow_residual_and_decay(long_half_64, bg64):
    _, trace = long_half_64
    assert trace.records[-1]["stat_residual"] <= 1e-6
    rate, _ = decay_rate_fit(trace, 2, 10)
    rate2, _ = decay_rate_fit(trace, 5, 12)
    assert -1.15 <= rate <= -0.85
    assert abs(rate - rate2) < 0.05


def test_volume_and_metric_bounds(short_half):
    _, trace = short_half
    vol = volume_ratio_bounds(trace)
    met = metric_equivalence_bounds(trace)
    assert np.isfinite(vol.details["C_low"]) and np.isfinite(vol.details["C_up"])
    assert met.details["volume_metric_consistency"] <= 1e-12
    assert met.value == pytest.approx(max(met.details["C_up"], met.details["C_down"], 0.0))


def test_volume_bounds_stable_under_refinement(long_half_64):
    bg128 = build_background(TorusSpec())
    _, coarse = long_half_64
    _, fine = run_flow(ConeParams(0.5), TimeSchedule(t_end=5.0), bg128)
    for key in ("C_low", "C_up"):
        a = volume_ratio_bounds(coarse, t_max=5.0).details[key]
        b = volume_ratio_bounds(fine, t_max=5.0).details[key]
        assert abs(a - b) / b <= 0.25, (key, a, b)


def test_bounds_need_positive_times(bg64):
    _, trace = run_flow(ConeParams(0.5), TimeSchedule(t_end=0.0), bg64)
    with pytest.raises(DiagnosticUnavailable):
        volume_ratio_bounds(trace)


def test_decay_fit_on_synthetic_trace():
    rows = [{c: 1.0 for c in TRACE_COLUMNS} for _ in range(12)]
    for t, r in zip(range(1, 13), rows):
        r["t"] = float(t)
        r["sup_phidot"] = 3.0 * np.exp(-t)
        r["inf_phidot"] = -1.0 * np.exp(-t)
    tr = trace_from_columns(ConeParams(0.5), rows)
    rate, amp = decay_rate_fit(tr, 1, 12)
    assert rate == pytest.approx(-1.0, abs=1e-12)
    assert amp == pytest.approx(3.0, rel=1e-12)


def test_decay_fit_needs_five_points(short_half):
    with pytest.raises(DiagnosticUnavailable):
        decay_rate_fit(short_half[1], 2, 10)


def test_persistent_failure_aborts_with_partial_trace(bg64, monkeypatch):
    calls = {"n": 0}
    real = MongeAmpereNewton.solve

    def failing(self, phi_init, phi_prev=None, c=0.0):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NonConvergenceError("forced")
        return real(self, phi_init, phi_prev, c)

    monkeypatch.setattr(MongeAmpereNewton, "solve", failing)
    with pytest.raises(AbortedRunError) as exc:
        run_flow(ConeParams(0.5), TimeSchedule(t_end=1.0), bg64)
    tr = exc.value.trace
    assert not tr.complete and len(tr.records) >= 1 and tr.rejected_steps > 10


def test_failed_step_is_retried_with_half_dt(bg64, monkeypatch):
    seen = []
    real = MongeAmpereNewton.solve

    def once(self, phi_init, phi_prev=None, c=0.0):
        seen.append(c)
        if len(seen) == 2:
            raise NonConvergenceError("forced")
        return real(self, phi_init, phi_prev, c)

    monkeypatch.setattr(MongeAmpereNewton, "solve", once)
    _, tr = run_flow(ConeParams(0.5), TimeSchedule(t_end=0.01), bg64)
    assert tr.complete and tr.rejected_steps == 1
    assert seen[2] == pytest.approx(2 * seen[1])


def test_monotone_in_beta_short(bg64):
    fields = [run_flow(ConeParams(b), SHORT, bg64)[1].fields for b in (0.5, 0.25, 0.125)]
    for i in range(len(fields[0])):
        for a, b in zip(fields, fields[1:]):
            assert (b[i] - a[i])[bg64.mask].max() <= 5e-10


def test_trace_columns_round_trip(short_half):
    _, trace = short_half
    rebuilt = trace_from_columns(trace.params, trace.records)
    assert np.array_equal(rebuilt.times, trace.times)
    np.testing.assert_allclose(rebuilt.column("max_inv_ratio"), trace.column("max_inv_ratio"), rtol=1e-14)
