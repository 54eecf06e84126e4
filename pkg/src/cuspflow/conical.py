"""Conical approximations ``psi_beta`` of the cusp potential and their diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as sp_integrate

from .errors import DiagnosticUnavailable, InvalidBackgroundError, InvalidMetricError, InvalidSpecError
from .reports import CheckReport
from .torus import BackgroundData, TorusSpec, ddbar_density, grad_log_section_norm, laplacian

DEFAULT_LADDER = tuple(2.0**-k for k in range(1, 8))


@dataclass(frozen=True)
class ConeParams:
    beta: float
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.beta <= 0.5:
            raise InvalidSpecError(f"beta must lie in (0, 1/2], got {self.beta}")
        if self.epsilon < 0:
            raise InvalidSpecError(f"epsilon must be >= 0, got {self.epsilon}")


def _check_log_s(log_s: np.ndarray) -> None:
    if np.any(log_s >= 0.0):
        raise InvalidBackgroundError("|s|_h^2 >= 1 somewhere; conical potentials are undefined")


def psi_of_log_s(beta: float, log_s) -> np.ndarray:
    """``-2 log((1 - |s|^(2 beta)) / beta)`` as a function of ``log|s|^2``."""
    log_s = np.asarray(log_s, dtype=float)
    _check_log_s(log_s)
    return -2.0 * np.log(-np.expm1(beta * log_s) / beta)


def psi0_of_log_s(log_s) -> np.ndarray:
    log_s = np.asarray(log_s, dtype=float)
    _check_log_s(log_s)
    return -np.log(log_s**2)


def psi_beta(params: ConeParams, bg: BackgroundData) -> np.ndarray:
    """Conical potential on the grid; tends to ``2 log beta`` at the puncture."""
    return psi_of_log_s(params.beta, bg.log_s_h_sq)


def psi_zero(bg: BackgroundData) -> np.ndarray:
    """Cusp potential ``-log(log^2 |s|_h^2)``, finite on nodes because they avoid the pole."""
    return psi0_of_log_s(bg.log_s_h_sq)


def rho_beta(params: ConeParams, bg: BackgroundData) -> np.ndarray:
    """Grid density of ``omega_beta = omega_0 + i ddbar psi_beta``."""
    return bg.rho0 + ddbar_density(psi_beta(params, bg), bg.spec)


def rho_beta_exact(beta: float, bg: BackgroundData) -> Callable[[np.ndarray], np.ndarray]:
    """Closed-form density of ``omega_beta`` at arbitrary points ``z - p``.

    With ``psi = F(log|s|^2)``: ``rho = rho0 (1 - F') + 4 F'' |d_z log|s|^2|^2``.
    """
    rho0 = bg.rho0_value
    tau = bg.spec.tau

    def rho(zrel):
        zrel = np.asarray(zrel, dtype=complex)
        L = bg.log_s_at(zrel)
        e = np.exp(beta * L)
        one_minus = -np.expm1(beta * L)
        f1 = 2.0 * beta * e / one_minus
        f2 = 2.0 * beta**2 * e / one_minus**2
        g = grad_log_section_norm(zrel, tau)
        return rho0 * (1.0 - f1) + 2.0 * f2 * np.abs(g) ** 2

    return rho


def check_monotone_psi(betas: Sequence[float], bg: BackgroundData, tol: float = 1e-12) -> CheckReport:
    """``psi_{beta_{k+1}} <= psi_{beta_k}`` pointwise along a decreasing ladder."""
    betas = [float(b) for b in betas]
    if any(b2 > b1 for b1, b2 in zip(betas, betas[1:])):
        raise InvalidSpecError("betas must be non-increasing")
    worst = 0.0
    per_pair = []
    prev = None
    for b in betas:
        cur = psi_beta(ConeParams(b), bg)
        if prev is not None:
            v = float(np.max(cur - prev))
            per_pair.append(v)
            worst = max(worst, v)
        prev = cur
    return CheckReport(
        "monotone_psi", worst, tol, worst <= tol,
        params={"betas": betas}, details={"per_pair_max_increase": per_pair},
    )


def check_domination(params: ConeParams, bg: BackgroundData) -> CheckReport:
    """``rho_beta >= rho0 / 2`` on off-guard nodes; reports the minimum ratio."""
    ratio = rho_beta(params, bg) / bg.rho0
    masked = np.where(bg.mask, ratio, np.inf)
    idx = np.unravel_index(np.argmin(masked), masked.shape)
    value = float(masked[idx])
    return CheckReport(
        "domination", value, 0.5, value >= 0.5,
        params={"beta": params.beta, "delta0": bg.spec.delta0},
        details={"argmin_node": [int(i) for i in idx], "min_ratio_all_nodes": float(ratio.min())},
    )


def _radial_distance(rho, r: float, angles: np.ndarray) -> float:
    dists = []
    for phi in angles:
        direction = np.exp(1j * phi)
        val, _ = sp_integrate.quad(
            lambda s: float(np.sqrt(rho(np.array(s * direction)))), 0.0, r, limit=200,
            epsabs=0.0, epsrel=1e-10,
        )
        dists.append(val)
    return float(np.mean(dists))


def cone_angle_estimate(
    params: ConeParams | None,
    bg: BackgroundData,
    rho: Callable[[np.ndarray], np.ndarray] | None = None,
    n_radii: int = 4,
    n_circle: int = 512,
    n_rays: int = 8,
) -> float:
    """Extrapolated ratio circumference / (2 pi * distance to puncture) for small circles.

    Circles are flat circles of radius ``r`` in ``[4h, 16h]`` around the
    puncture; lengths are measured in the metric ``rho`` (default: the exact
    density of ``omega_beta``).  A cone of angle ``2 pi beta`` gives ``beta``;
    a smooth point gives 1.
    """
    spec = bg.spec
    h = 1.0 / max(spec.nx, spec.ny)
    r_lo, r_hi = 4 * h, 16 * h
    if n_radii < 3 or r_hi > 0.25 * min(1.0, spec.tau.imag):
        raise DiagnosticUnavailable("grid too coarse for three resolvable sample circles")
    if rho is None:
        if params is None:
            raise ValueError("give cone params or an explicit density")
        rho = rho_beta_exact(params.beta, bg)
    radii = np.linspace(r_lo, r_hi, n_radii)
    theta = 2 * np.pi * (np.arange(n_circle) + 0.5) / n_circle
    rays = 2 * np.pi * (np.arange(n_rays) + 0.25) / n_rays
    ratios = []
    for r in radii:
        pts = r * np.exp(1j * theta)
        circumference = float(np.sum(np.sqrt(rho(pts))) * (2 * np.pi * r / n_circle))
        ratios.append(circumference / (2 * np.pi * _radial_distance(rho, r, rays)))
    slope, intercept = np.polyfit(radii, ratios, 1)
    return float(intercept)


def gauss_curvature(rho: np.ndarray, spec: TorusSpec, mask: np.ndarray | None = None) -> np.ndarray:
    """``-(0.5 Delta log rho) / rho``; values on guard nodes are not meaningful."""
    rho = np.asarray(rho, dtype=float)
    check = rho if mask is None else rho[mask]
    if np.any(check <= 0):
        raise InvalidMetricError("density must be positive to take its curvature")
    safe = np.where(rho > 0, rho, 1.0)
    return -0.5 * laplacian(np.log(safe), spec) / safe


def cusp_profile(rho: np.ndarray, bg: BackgroundData, r_min: float | None = None) -> CheckReport:
    """Band of ``rho |z|^2 log^2 |z|^2`` over dyadic annuli around the puncture.

    ``value`` is ``C = max(max band, 1/min band)``; a cusp metric keeps ``C``
    bounded as the annuli shrink, a smooth metric does not.
    """
    spec = bg.spec
    r = spec.distance_to_puncture()
    h = spec.h
    r_min = 4 * h if r_min is None else r_min
    r_max = 0.25 * min(1.0, spec.tau.imag)
    with np.errstate(divide="ignore"):
        prof = np.asarray(rho) * r**2 * np.log(r**2) ** 2
    bands = []
    lo = r_min
    while lo * 2 <= r_max + 1e-12:
        sel = (r >= lo) & (r < 2 * lo)
        if np.any(sel):
            bands.append({"r_lo": lo, "r_hi": 2 * lo,
                          "min": float(prof[sel].min()), "max": float(prof[sel].max())})
        lo *= 2
    if not bands:
        raise DiagnosticUnavailable("no resolvable annulus")
    band_min = min(b["min"] for b in bands)
    band_max = max(b["max"] for b in bands)
    c = max(band_max, 1.0 / band_min) if band_min > 0 else np.inf
    return CheckReport(
        "cusp_profile", float(c), None, bool(np.isfinite(c)),
        details={"annuli": bands, "band": [band_min, band_max]},
    )
