"""Damped Newton solvers for the implicit flow step and the elliptic conical KE equation.

Both problems are zeros of

    G_c(phi) = c*(phi - phi_prev) - log(rho(phi)/rho0) + phi - f

with ``rho(phi) = rho0 + 0.5*Lap(phi)`` and forcing
``f = h0 + (1 - beta)*log(eps^2 + |s|^2)``.  ``c = 1/dt`` gives a backward
Euler step, ``c = 0`` the stationary equation.  The Jacobian
``(c + 1) I - 0.5 diag(1/rho) Lap`` becomes symmetric positive definite after
scaling rows by ``rho``; it is solved by preconditioned CG with the
constant-coefficient Fourier inverse as preconditioner.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .conical import ConeParams, psi_beta, psi_zero
from .errors import InvalidMetricError, InvalidSpecError, NonConvergenceError, StepRejectedError
from .torus import BackgroundData, apply_multiplier, laplacian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 50
    damping_min: float = 2.0**-20
    positivity_margin: float = 1e-8
    cg_max_iter: int = 500

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidSpecError("tol must be positive")
        if not 0 < self.damping_min <= 1:
            raise InvalidSpecError("damping_min must lie in (0, 1]")


@dataclass
class NewtonReport:
    iterations: int = 0
    residual: float = np.inf
    min_density_ratio: float = np.inf
    converged: bool = False
    cg_iterations: int = 0
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["residual"] = float(self.residual)
        d["min_density_ratio"] = float(self.min_density_ratio)
        return d


def log_regularized(bg: BackgroundData, epsilon: float) -> np.ndarray:
    """``log(eps^2 + |s|_h^2)`` evaluated without underflow."""
    if epsilon == 0:
        return np.asarray(bg.log_s_h_sq)
    return np.logaddexp(2.0 * np.log(epsilon), bg.log_s_h_sq)


def forcing(params: ConeParams, bg: BackgroundData) -> np.ndarray:
    """Zeroth-order right side ``h0 + (1 - beta) log(eps^2 + |s|^2)``."""
    return bg.h0 + (1.0 - params.beta) * log_regularized(bg, params.epsilon)


def density(phi: np.ndarray, bg: BackgroundData, background_scale: float = 1.0) -> np.ndarray:
    """``background_scale*rho0 + 0.5*Lap(phi)``."""
    return background_scale * bg.rho0 + 0.5 * laplacian(phi, bg.spec)


def flow_rhs(phi, force, bg, background_scale=1.0, rho=None):
    """Right side ``log(rho/rho0) - phi + f`` of the potential-level flow."""
    rho = density(phi, bg, background_scale) if rho is None else rho
    if np.any(rho <= 0):
        raise InvalidMetricError("density is not positive")
    return np.log(rho / bg.rho0) - phi + force


def _pcg(apply_a, b, precond, tol, max_iter):
    """Preconditioned conjugate gradients; fixed reduction order, so deterministic."""
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.sqrt(np.vdot(b, b).real)
    if bnorm == 0:
        return x, 0
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    for it in range(1, max_iter + 1):
        ap = apply_a(p)
        alpha = rz / np.vdot(p, ap).real
        x += alpha * p
        r -= alpha * ap
        if np.sqrt(np.vdot(r, r).real) <= tol * bnorm:
            return x, it
        z = precond(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter


class MongeAmpereNewton:
    """Newton solver for ``G_c(phi) = 0`` on a fixed background.

    One instance owns its scratch state and is not thread-safe; build one per
    problem.  ``background_scale`` multiplies ``rho0`` inside ``rho(phi)``
    (``1 - beta`` for the alternate family with background ``omega0 - beta theta``).
    """

    def __init__(self, bg: BackgroundData, force: np.ndarray, cfg: NewtonConfig | None = None,
                 background_scale: float = 1.0):
        self.bg = bg
        self.spec = bg.spec
        self.force = np.asarray(force, dtype=float)
        self.cfg = cfg or NewtonConfig()
        self.background_scale = float(background_scale)
        self._half_lap = 0.5 * self.spec._symbol

    def density(self, phi):
        return density(phi, self.bg, self.background_scale)

    def residual(self, phi, phi_prev, c, rho=None):
        rho = self.density(phi) if rho is None else rho
        g = np.log(rho / self.bg.rho0) - phi + self.force
        if c:
            g = c * (phi - phi_prev) - g
        else:
            g = -g
        return g

    def jacobian_apply(self, phi, v, c):
        """``dG_c(phi)[v] = (c + 1) v - 0.5 Lap(v) / rho``."""
        rho = self.density(phi)
        return (c + 1.0) * v - apply_multiplier(v, self._half_lap) / rho

    def solve(self, phi_init, phi_prev=None, c=0.0):
        cfg = self.cfg
        rho0 = self.bg.rho0_value
        phi = np.array(phi_init, dtype=float)
        phi_prev = phi if phi_prev is None else np.asarray(phi_prev, dtype=float)
        rho = self.density(phi)
        if np.any(rho <= 0):
            raise InvalidMetricError("initial iterate has non-positive density")
        report = NewtonReport(min_density_ratio=float(rho.min() / rho0))
        g = self.residual(phi, phi_prev, c, rho)
        res = float(np.max(np.abs(g)))
        report.history.append(res)
        shift = (c + 1.0) * rho0
        precond_symbol = 1.0 / (shift - self._half_lap)
        precond = lambda r: apply_multiplier(r, precond_symbol)
        for it in range(cfg.max_iter):
            if res <= cfg.tol:
                report.converged = True
                break
            weight = (c + 1.0) * rho
            apply_a = lambda v: weight * v - apply_multiplier(v, self._half_lap)
            cg_tol = min(1e-4, max(1e-13, 0.1 * res))
            delta, cg_it = _pcg(apply_a, -rho * g, precond, cg_tol, cfg.cg_max_iter)
            report.cg_iterations += cg_it
            step = 1.0
            accepted = False
            saw_positive = False
            while step >= cfg.damping_min:
                trial = phi + step * delta
                rho_t = self.density(trial)
                ratio = float(rho_t.min() / rho0)
                if ratio >= cfg.positivity_margin:
                    saw_positive = True
                    g_t = self.residual(trial, phi_prev, c, rho_t)
                    res_t = float(np.max(np.abs(g_t)))
                    if res_t < res:
                        accepted = True
                        break
                step *= 0.5
            report.iterations = it + 1
            if not accepted:
                report.residual = res
                if not saw_positive:
                    raise StepRejectedError("no damping keeps the density positive", report)
                raise NonConvergenceError(f"line search stalled at residual {res:.3e}", report)
            phi, rho, g, res = trial, rho_t, g_t, res_t
            report.min_density_ratio = min(report.min_density_ratio, ratio)
            report.history.append(res)
        else:
            if res <= cfg.tol:
                report.converged = True
        report.residual = res
        if not report.converged:
            raise NonConvergenceError(f"Newton hit max_iter={cfg.max_iter} at residual {res:.3e}", report)
        return phi, report


def implicit_euler_step(phi, dt, params: ConeParams, bg: BackgroundData,
                        cfg: NewtonConfig | None = None, force=None, background_scale=1.0):
    """One backward Euler step of the flow; returns ``(phi_next, NewtonReport)``."""
    if not dt > 0:
        raise InvalidSpecError("dt must be positive")
    force = forcing(params, bg) if force is None else force
    solver = MongeAmpereNewton(bg, force, cfg, background_scale)
    return solver.solve(phi, phi_prev=phi, c=1.0 / dt)


def _epsilon_path(target: float) -> list[float]:
    """Halving sequence from 0.1 down to ``target`` (``0`` is reached after 1e-12)."""
    path = []
    eps = 0.1
    floor = target if target > 0 else 1e-12
    while eps > floor:
        path.append(eps)
        eps *= 0.5
    path.append(target)
    return path


def elliptic_ke_solve(params: ConeParams, bg: BackgroundData, cfg: NewtonConfig | None = None,
                      init=None, force=None):
    """Solve ``rho0 + 0.5 Lap(phi) = rho0 exp(phi - h0) (eps^2 + |s|^2)^-(1 - beta)``.

    Cold start from ``init`` (default ``psi_beta``); on failure, path-follows
    the regularization from ``eps = 0.1`` downwards by halving.
    """
    cfg = cfg or NewtonConfig()
    init = psi_beta(params, bg) if init is None else np.asarray(init, dtype=float)
    f = forcing(params, bg) if force is None else force
    try:
        return MongeAmpereNewton(bg, f, cfg).solve(init)
    except NonConvergenceError as exc:
        if force is not None:
            raise
        log.info("cold start failed (%s); continuing in epsilon", exc)
    phi = init
    for eps in _epsilon_path(params.epsilon):
        phi, rep = MongeAmpereNewton(bg, forcing(ConeParams(params.beta, eps), bg), cfg).solve(phi)
    return phi, rep


def stationary_residual(phi, params: ConeParams, bg: BackgroundData, mask=None) -> float:
    """Off-guard sup of ``|log(rho/rho0) - phi + f|``."""
    r = flow_rhs(phi, forcing(params, bg), bg)
    mask = bg.mask if mask is None else mask
    return float(np.max(np.abs(r[mask])))


def multistart_inits(params: ConeParams, bg: BackgroundData) -> dict[str, np.ndarray]:
    """Five distinct initial guesses for the uniqueness probe."""
    pb = psi_beta(params, bg)
    p0 = psi_zero(bg)
    # psi0 clipped to the psi_beta range keeps the initial density positive
    clipped = np.maximum(p0, pb.min())
    starts = {"zero": np.zeros(bg.spec.shape), "psi_beta": pb, "psi0_clipped": clipped,
              "psi_beta_plus1": pb + 1.0, "psi_beta_minus1": pb - 1.0}
    ok = {}
    for k, v in starts.items():
        if np.all(density(v, bg) > 0):
            ok[k] = v
        else:
            ok[k] = pb + 0.5 * (len(ok) - 2)
    return ok
