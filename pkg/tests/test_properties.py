import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cuspflow.conical import psi0_of_log_s, psi_of_log_s
from cuspflow.config import config_from_dict
from cuspflow.limits import barrier_h_of_t
from cuspflow.reports import CheckReport
from cuspflow.solvers import density
from cuspflow.torus import TorusSpec, build_background, integrate, laplacian, theta1

BG = build_background(TorusSpec(nx=32, ny=32))
betas = st.floats(min_value=1e-4, max_value=0.5)
log_norms = st.floats(min_value=-200.0, max_value=-1e-3)


@given(b1=betas, b2=betas, L=log_norms)
def test_psi_monotone_in_beta(b1, b2, L):
    lo, hi = sorted((b1, b2))
    assert psi_of_log_s(lo, L) <= psi_of_log_s(hi, L) + 1e-12


@given(b=betas, L=log_norms)
def test_psi_above_cusp_potential(b, L):
    # 1 - x^b <= b log(1/x), so psi_beta >= psi_0
    assert psi_of_log_s(b, L) >= psi0_of_log_s(L) - 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), amp=st.floats(0.0, 0.05))
def test_area_is_two_pi_for_any_potential(seed, amp):
    rng = np.random.default_rng(seed)
    phi = amp * rng.normal(size=BG.spec.shape)
    assert abs(integrate(density(phi, BG), BG.spec) - 2 * np.pi) < 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stencil=st.sampled_from(["fd", "spectral"]))
def test_laplacian_symmetric_and_kills_constants(seed, stencil):
    spec = TorusSpec(nx=16, ny=16, stencil=stencil)
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2,) + spec.shape)
    assert abs(np.vdot(laplacian(f, spec), g) - np.vdot(f, laplacian(g, spec))) < 1e-8 * np.abs(f).sum() * 1e3
    assert np.abs(laplacian(np.full(spec.shape, rng.normal()), spec)).max() < 1e-9


@given(x=st.floats(-0.5, 0.5), y=st.floats(-0.5, 0.5))
def test_theta1_is_odd(x, y):
    z = complex(x, y)
    assert abs(theta1(-z, 1j) + theta1(z, 1j)) <= 1e-12 * max(1.0, abs(theta1(z, 1j)))


@settings(max_examples=50)
@given(t=st.floats(0.01, 4.0), u=st.floats(0.0, 5.0))
def test_barrier_derivative_identity(t, u):
    h = 1e-6 * max(t, 0.1)
    fd = (barrier_h_of_t(t + h, u) - barrier_h_of_t(t - h, u)) / (2 * h)
    exact = -(np.exp(t) + 1) * u + np.exp(t) * (np.log(t) - t)
    assert abs(fd - exact) <= 1e-5 * max(1.0, abs(exact))


@given(v=st.floats(allow_nan=False), tol=st.one_of(st.none(), st.floats(0, 1)), ok=st.booleans())
def test_report_json_round_trip(v, tol, ok):
    rep = CheckReport("x", v, tol, ok, details={"arr": np.arange(3)})
    d = json.loads(rep.to_json())
    assert d["pass"] is ok and d["details"]["arr"] == [0, 1, 2]


@settings(max_examples=25)
@given(ks=st.lists(st.integers(1, 12), min_size=1, max_size=6, unique=True), n=st.sampled_from([16, 32, 64]))
def test_config_snapshot_round_trip(ks, n):
    betas = [2.0**-k for k in sorted(ks)]
    cfg = config_from_dict({"torus": {"nx": n, "ny": n}, "ladder": {"betas": betas}})
    assert config_from_dict(cfg.snapshot()).snapshot() == cfg.snapshot()
