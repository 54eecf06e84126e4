"""Background geometry of the once-punctured flat torus and discrete calculus on it.

Fields are plain ``numpy`` arrays of shape ``(ny, nx)``: row ``j`` holds lattice
coordinate ``y' = (j + offset)/ny``, column ``i`` holds ``x' = (i + offset)/nx``,
and the point is ``z = x' + tau*y'``.  Periodicity is structural: every
operator here is a Fourier multiplier or a wrapped index shift.

Density convention: a (1,1)-form ``omega`` is stored as ``rho`` with
``omega = rho dx^dy`` and ``i ddbar f`` maps to ``0.5 * laplacian(f)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft
from scipy import ndimage

from .errors import InvalidSpecError

GUARD_RADIUS = 2.0  # cells


@dataclass(frozen=True)
class TorusSpec:
    """Immutable description of the testbed ``C/(Z + tau Z)`` with one puncture.

    ``stencil`` selects the discrete Laplacian: ``"fd"`` is the compact
    finite-difference stencil (a monotone M-matrix for the lattices we
    accept), ``"spectral"`` the exact Fourier multiplier.  Both are
    diagonalized by the FFT, which the solvers use for preconditioning.
    """

    tau: complex = 1j
    nx: int = 128
    ny: int = 128
    offset: float = 0.5
    delta0: float = float(np.exp(-4.0))
    puncture: tuple[float, float] = (0.0, 0.0)
    stencil: str = "fd"

    def __post_init__(self):
        object.__setattr__(self, "tau", complex(self.tau))
        object.__setattr__(self, "puncture", tuple(float(p) for p in self.puncture))
        if not self.tau.imag > 0:
            raise InvalidSpecError(f"Im(tau) must be positive, got tau={self.tau}")
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if int(n) != n or n < 16 or n % 2:
                raise InvalidSpecError(f"{name} must be an even integer >= 16, got {n}")
        if not 0.0 < self.offset < 1.0:
            raise InvalidSpecError(f"offset must lie in (0, 1) cell units, got {self.offset}")
        if not 0.0 < self.delta0 < 1.0:
            raise InvalidSpecError(f"delta0 must lie in (0, 1), got {self.delta0}")
        if self.stencil not in ("fd", "spectral"):
            raise InvalidSpecError(f"unknown stencil {self.stencil!r}")
        fx = (self.puncture[0] * self.nx - self.offset) % 1.0
        fy = (self.puncture[1] * self.ny - self.offset) % 1.0
        if min(fx, 1 - fx) < 1e-9 and min(fy, 1 - fy) < 1e-9:
            raise InvalidSpecError("puncture coincides with a grid node")
        if self.stencil == "fd":
            a, b, c = self._metric_coefficients
            hx, hy = 1.0 / self.nx, 1.0 / self.ny
            cross = abs(b) / (2 * hx * hy)
            if a / hx**2 < cross or c / hy**2 < cross:
                raise InvalidSpecError(
                    "lattice too oblique for the monotone stencil; reduce tau or use stencil='spectral'"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def area(self) -> float:
        return self.tau.imag

    @property
    def cell_area(self) -> float:
        return self.tau.imag / (self.nx * self.ny)

    @property
    def h(self) -> float:
        """Representative mesh width (flat metric)."""
        return float(np.sqrt(self.cell_area))

    @property
    def _metric_coefficients(self) -> tuple[float, float, float]:
        # Delta = a d_x'^2 + b d_x' d_y' + c d_y'^2 in lattice coordinates
        tr, ti = self.tau.real, self.tau.imag
        return 1.0 + tr**2 / ti**2, -2.0 * tr / ti**2, 1.0 / ti**2

    def with_grid(self, nx: int, ny: int | None = None) -> "TorusSpec":
        from dataclasses import replace

        return replace(self, nx=nx, ny=nx if ny is None else ny)

    def lattice_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Lattice coordinates ``(x', y')`` of the nodes, relative to the puncture and
        reduced to ``[-1/2, 1/2)``."""
        xs = (np.arange(self.nx) + self.offset) / self.nx - self.puncture[0]
        ys = (np.arange(self.ny) + self.offset) / self.ny - self.puncture[1]
        xs = (xs + 0.5) % 1.0 - 0.5
        ys = (ys + 0.5) % 1.0 - 0.5
        return np.meshgrid(xs, ys)

    def node_points(self) -> np.ndarray:
        """Complex positions ``z - p`` of the nodes in the reduced fundamental domain."""
        xp, yp = self.lattice_coords()
        return xp + self.tau * yp

    def distance_to_puncture(self) -> np.ndarray:
        """Flat distance from each node to the nearest lattice translate of the puncture."""
        z = self.node_points()
        best = np.abs(z)
        for m in (-1, 0, 1):
            for k in (-1, 0, 1):
                best = np.minimum(best, np.abs(z + m + k * self.tau))
        return best

    def guard_mask(self, radius: float = GUARD_RADIUS) -> np.ndarray:
        """Boolean mask, True on nodes *outside* the guard ring around the puncture."""
        xp, yp = self.lattice_coords()
        cells = np.hypot(xp * self.nx, yp * self.ny)
        return cells >= radius

    @cached_property
    def _symbol(self) -> np.ndarray:
        return _laplacian_symbol(self)


def _laplacian_symbol(spec: TorusSpec) -> np.ndarray:
    a, b, c = spec._metric_coefficients
    k = scipy.fft.fftfreq(spec.nx, 1.0 / spec.nx)
    l = scipy.fft.fftfreq(spec.ny, 1.0 / spec.ny)
    K, L = np.meshgrid(k, l)
    if spec.stencil == "spectral":
        # cross term dropped on Nyquist rows/columns keeps the operator real
        nyq = (np.abs(K) == spec.nx // 2) | (np.abs(L) == spec.ny // 2)
        cross = np.where(nyq, 0.0, b * K * L)
        return -4.0 * np.pi**2 * (a * K**2 + cross + c * L**2)
    hx, hy = 1.0 / spec.nx, 1.0 / spec.ny
    tx, ty = 2 * np.pi * K / spec.nx, 2 * np.pi * L / spec.ny
    dxx = -4.0 / hx**2 * np.sin(tx / 2) ** 2
    dyy = -4.0 / hy**2 * np.sin(ty / 2) ** 2
    if b >= 0:
        dxy = (np.cos(tx + ty) - np.cos(tx) - np.cos(ty) + 1.0) / (hx * hy)
    else:
        dxy = -(np.cos(tx - ty) - np.cos(tx) - np.cos(ty) + 1.0) / (hx * hy)
    return a * dxx + b * dxy + c * dyy


def apply_multiplier(f: np.ndarray, symbol: np.ndarray) -> np.ndarray:
    return scipy.fft.ifft2(symbol * scipy.fft.fft2(f)).real


def _fd_stencil(spec: TorusSpec) -> list[tuple[int, int, float]]:
    """``(dy, dx, weight)`` triples of the compact stencil; same operator as the FD symbol."""
    a, b, c = spec._metric_coefficients
    hx, hy = 1.0 / spec.nx, 1.0 / spec.ny
    wx, wy = a / hx**2, c / hy**2
    m = abs(b) / (2 * hx * hy)
    d = 1 if b >= 0 else -1
    out = [(0, 1, wx - m), (0, -1, wx - m), (1, 0, wy - m), (-1, 0, wy - m)]
    if m:
        out += [(d, 1, m), (-d, -1, m)]
    out.append((0, 0, -2 * (wx + wy) + 2 * m))
    return out


def laplacian(f: np.ndarray, spec: TorusSpec) -> np.ndarray:
    """Flat Laplacian ``d_x^2 + d_y^2`` of a periodic grid field.

    The FD stencil is applied in real space by wrapped shifts (round-off scales
    with the local second differences, not with the field's magnitude); the
    spectral variant goes through the FFT.
    """
    f = np.asarray(f, dtype=float)
    if spec.stencil == "spectral":
        return apply_multiplier(f, spec._symbol)
    out = np.zeros_like(f)
    # weights sum to zero: accumulate differences and skip the centre weight
    for dy, dx, w in _fd_stencil(spec):
        if dy or dx:
            out += w * (np.roll(f, (-dy, -dx), axis=(0, 1)) - f)
    return out


def ddbar_density(f: np.ndarray, spec: TorusSpec) -> np.ndarray:
    """Density of ``i ddbar f`` with respect to ``dx^dy``."""
    return 0.5 * laplacian(f, spec)


def integrate(f: np.ndarray, spec: TorusSpec) -> float:
    """Midpoint rule over the fundamental domain."""
    return float(np.sum(f) * spec.cell_area)


def interpolate_at(f: np.ndarray, spec: TorusSpec, point: tuple[float, float]) -> float:
    """Periodic cubic-spline value of ``f`` at lattice-fractional ``point``."""
    col = (point[0] * spec.nx - spec.offset) % spec.nx
    row = (point[1] * spec.ny - spec.offset) % spec.ny
    out = ndimage.map_coordinates(
        np.asarray(f, dtype=float), [[row], [col]], order=3, mode="grid-wrap"
    )
    return float(out[0])


# --- theta function -------------------------------------------------------

_MAX_TERMS = 200


def theta1(z, tau):
    """Odd Jacobi theta function ``theta_1(pi z | tau)``.

    Sums ``2 sum_n (-1)^n q^((n+1/2)^2) sin((2n+1) pi z)`` with ``q = exp(i pi tau)``
    until every term drops below ``1e-16`` of its partial sum.  Accepts scalars or
    arrays; accuracy is best for ``z`` reduced to the fundamental domain around 0.
    """
    tau = complex(tau)
    if not tau.imag > 0:
        raise InvalidSpecError(f"theta series diverges for Im(tau) <= 0 (tau={tau})")
    z = np.asarray(z, dtype=complex)
    v = np.pi * z
    total = np.zeros_like(z)
    log_q = 1j * np.pi * tau
    for n in range(_MAX_TERMS):
        term = (-1) ** n * np.exp(log_q * (n + 0.5) ** 2) * np.sin((2 * n + 1) * v)
        total = total + term
        if np.all(np.abs(term) <= 1e-16 * np.abs(total)):
            break
    out = 2.0 * total
    return out[()] if out.ndim == 0 else out


def theta1_prime(z, tau):
    """Derivative of ``theta_1(v | tau)`` with respect to ``v`` at ``v = pi z``."""
    tau = complex(tau)
    z = np.asarray(z, dtype=complex)
    v = np.pi * z
    total = np.zeros_like(z)
    log_q = 1j * np.pi * tau
    for n in range(_MAX_TERMS):
        term = (-1) ** n * (2 * n + 1) * np.exp(log_q * (n + 0.5) ** 2) * np.cos((2 * n + 1) * v)
        total = total + term
        if np.all(np.abs(term) <= 1e-16 * np.abs(total)):
            break
    out = 2.0 * total
    return out[()] if out.ndim == 0 else out


def raw_log_section_norm(zrel, tau) -> np.ndarray:
    """Unnormalized ``log |s|_h^2`` at points ``zrel = z - p`` (any representative)."""
    tau = complex(tau)
    zrel = np.asarray(zrel, dtype=complex)
    # reduce into the fundamental domain centred on the puncture
    yq = zrel.imag / tau.imag
    yq = yq - np.round(yq)
    xq = zrel.real - tau.real * (zrel.imag / tau.imag)
    xq = xq - np.round(xq)
    zr = xq + tau * yq
    with np.errstate(divide="ignore"):
        return np.log(np.abs(theta1(zr, tau)) ** 2) - 2.0 * np.pi * zr.imag**2 / tau.imag


def grad_log_section_norm(zrel, tau) -> np.ndarray:
    """``d_z log |s|_h^2`` (complex); the flat gradient has squared norm ``4|.|^2``."""
    tau = complex(tau)
    zrel = np.asarray(zrel, dtype=complex)
    yq = zrel.imag / tau.imag
    yq = yq - np.round(yq)
    xq = zrel.real - tau.real * (zrel.imag / tau.imag)
    xq = xq - np.round(xq)
    zr = xq + tau * yq
    return np.pi * theta1_prime(zr, tau) / theta1(zr, tau) + 2j * np.pi * zr.imag / tau.imag


@dataclass(frozen=True)
class BackgroundData:
    """Exact background fields of the testbed.

    ``log_s_h_sq`` is ``log |s|_h^2`` normalized so its grid maximum is
    ``log(delta0)``; ``c_norm`` is the additive constant that achieved it, so
    the same metric can be evaluated off-grid with :meth:`log_s_at`.
    """

    spec: TorusSpec
    log_s_h_sq: np.ndarray
    rho0: np.ndarray
    theta_dens: np.ndarray
    h0: float
    c_norm: float
    mask: np.ndarray = field(repr=False)

    @property
    def rho0_value(self) -> float:
        return 2.0 * np.pi / self.spec.tau.imag

    def log_s_at(self, zrel) -> np.ndarray:
        return raw_log_section_norm(zrel, self.spec.tau) + self.c_norm


def build_background(spec: TorusSpec) -> BackgroundData:
    """Section norm, flat metric ``omega_0 = theta`` and ``h_0 = 0`` on the grid of ``spec``."""
    raw = raw_log_section_norm(spec.node_points(), spec.tau)
    if not np.all(np.isfinite(raw)):
        raise InvalidSpecError("a grid node sits on the puncture")
    c_norm = float(np.log(spec.delta0) - raw.max())
    log_s = raw + c_norm
    rho0 = np.full(spec.shape, 2.0 * np.pi / spec.tau.imag)
    for arr in (log_s, rho0):
        arr.setflags(write=False)
    return BackgroundData(
        spec=spec,
        log_s_h_sq=log_s,
        rho0=rho0,
        theta_dens=rho0,
        h0=0.0,
        c_norm=c_norm,
        mask=spec.guard_mask(),
    )


def poincare_lelong_residual(eta: np.ndarray, bg: BackgroundData) -> float:
    """Grid defect of ``0.5 Delta log|s|^2 = -theta + 2 pi delta_D`` tested against ``eta``."""
    spec = bg.spec
    lhs = integrate(bg.log_s_h_sq * ddbar_density(eta, spec), spec)
    lhs += integrate(bg.theta_dens * eta, spec)
    return lhs - 2.0 * np.pi * interpolate_at(eta, spec, spec.puncture)


def pole_bump(spec: TorusSpec, width: float = 0.02) -> np.ndarray:
    """Smooth periodic-enough test function ``exp(-|z - p|^2 / width)`` centred on the puncture."""
    return np.exp(-spec.distance_to_puncture() ** 2 / width)


def refinement_order(errors, ns) -> float:
    """Least-squares slope of ``-log error`` against ``log n``."""
    slope = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.abs(np.asarray(errors, float))), 1)[0]
    return float(-slope)
