"""Periodic-grid Schroedinger dynamics for a single atom in the conveyor belt.

Wave functions are arrays on ``Grid.x``; a leading batch axis is allowed
throughout the propagation code so that many trajectories (or trap depths)
advance through the same FFTs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.fft as sfft
from scipy import constants
from scipy.optimize import brentq

from . import lattice
from .lattice import SITE, LatticeParams, SpinDownField

CESIUM_MASS = 132.905451933 * constants.atomic_mass
NORM_TOL = 1e-12
DT_PER_PERIOD = 512
ALIAS_FRACTION = 0.9
ALIAS_LEVEL = 1e-8


class ConvergenceError(RuntimeError):
    pass


class ResolutionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Grid:
    n_sites: int = 16
    pts_per_site: int = 64

    def __post_init__(self):
        n = self.n_sites * self.pts_per_site
        if n & (n - 1) or n < 2:
            raise ValueError(f"grid size {n} is not a power of two")

    @property
    def n(self) -> int:
        return self.n_sites * self.pts_per_site

    @property
    def dx(self) -> float:
        return SITE / self.pts_per_site

    @property
    def length(self) -> float:
        return self.n_sites * SITE

    @property
    def p_max(self) -> float:
        return math.pi / self.dx

    @cached_property
    def x(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx

    @cached_property
    def p(self) -> np.ndarray:
        return 2 * np.pi * sfft.fftfreq(self.n, d=self.dx)

    @cached_property
    def cos2x(self) -> np.ndarray:
        return np.cos(2 * self.x)

    @cached_property
    def sin2x(self) -> np.ndarray:
        return np.sin(2 * self.x)

    def refined(self) -> "Grid":
        return Grid(self.n_sites, 2 * self.pts_per_site)


def default_grid(tau: float, params: LatticeParams, base: Grid = Grid()) -> Grid:
    """Escalate resolution for short ramps, whose kicks approach the cutoff."""
    if tau < 0.5 * params.tau_ho and base.pts_per_site < 128:
        return Grid(base.n_sites, 128)
    return base


def default_dt(params: LatticeParams) -> float:
    return params.tau_ho / DT_PER_PERIOD


@dataclass(eq=False)
class WaveFunction:
    grid: Grid
    amps: np.ndarray

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amps) ** 2) * self.grid.dx)

    def normalized(self) -> "WaveFunction":
        return WaveFunction(self.grid, self.amps / math.sqrt(self.norm()))

    def overlap(self, other: "WaveFunction") -> complex:
        """<self|other>"""
        _check_grid(self, other)
        return complex(np.vdot(self.amps, other.amps) * self.grid.dx)

    def shifted(self, s: float) -> "WaveFunction":
        return WaveFunction(self.grid, shift(self.amps, self.grid, s))

    def mean_x(self) -> float:
        w = np.abs(self.amps) ** 2 * self.grid.dx
        return float(np.sum(w * self.grid.x))

    def width_x(self) -> float:
        w = np.abs(self.amps) ** 2 * self.grid.dx
        m = np.sum(w * self.grid.x)
        return float(math.sqrt(np.sum(w * (self.grid.x - m) ** 2)))

    def width_p(self) -> float:
        phi = sfft.fft(self.amps)
        w = np.abs(phi) ** 2
        w = w / w.sum()
        m = np.sum(w * self.grid.p)
        return float(math.sqrt(np.sum(w * (self.grid.p - m) ** 2)))


def _check_grid(a: WaveFunction, b: WaveFunction):
    if a.grid != b.grid or a.amps.shape != b.amps.shape:
        raise ValueError("wave functions live on different grids")


def shift(amps: np.ndarray, grid: Grid, s: float) -> np.ndarray:
    """psi(x - s); exact rolls for whole grid steps, spectral phase otherwise."""
    k = s / grid.dx
    if abs(k - round(k)) < 1e-9:
        return np.roll(amps, int(round(k)), axis=-1)
    return sfft.ifft(sfft.fft(amps, axis=-1) * np.exp(-1j * grid.p * s), axis=-1)


# --- potentials -------------------------------------------------------------

def well_potential(grid: Grid, u0, x_trap, well: str = "lattice") -> np.ndarray:
    """Trap potential on the grid; batch axis follows the shapes of u0/x_trap.

    ``harmonic`` is the small-oscillation limit u0 (x - x_trap)^2 - u0 with the
    distance taken modulo the box, used to check against closed forms.
    """
    u0 = np.asarray(u0, dtype=float)[..., None]
    a = np.asarray(x_trap, dtype=float)[..., None]
    if well == "lattice":
        c = np.cos(2 * a)
        s = np.sin(2 * a)
        return -0.5 * u0 * (1 + grid.cos2x * c + grid.sin2x * s)
    if well == "harmonic":
        y = (grid.x - a + grid.length / 2) % grid.length - grid.length / 2
        return u0 * y**2 - u0
    raise ValueError(f"unknown well {well!r}")


class ConveyorPotential:
    """U(x, t) for trap positions given by ``positions(t)`` (scalar or batch)."""

    def __init__(self, grid: Grid, u0, positions: Callable, well: str = "lattice"):
        self.grid = grid
        self.u0 = u0
        self.positions = positions
        self.well = well

    def __call__(self, t: float) -> np.ndarray:
        return well_potential(self.grid, self.u0, self.positions(t), self.well)


# --- propagation ------------------------------------------------------------

def _steps(t0: float, t1: float, dt: float) -> tuple[int, float]:
    n = max(2, int(math.ceil((t1 - t0) / dt - 1e-9)))
    n += n % 2
    return n, (t1 - t0) / n


def split_step(amps: np.ndarray, grid: Grid, potential: Callable, t0: float, t1: float, dt: float,
               observer: Optional[Callable] = None, every: int = 1) -> np.ndarray:
    """Strang splitting: half kick, kinetic drift in momentum space, half kick.

    Both half kicks of a step use U at the step midpoint, so jumps placed on
    step boundaries cost no accuracy order. ``observer(k, t, amps)`` is called
    before the first step and after every ``every``-th step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    psi = np.array(amps, dtype=complex)
    if t1 == t0:
        if observer is not None:
            observer(0, t0, psi)
        return psi
    n, h = _steps(t0, t1, dt)
    drift = np.exp(-1j * grid.p**2 * h)
    if observer is not None:
        observer(0, t0, psi)
    for k in range(n):
        kick = np.exp(-0.5j * h * potential(t0 + (k + 0.5) * h))
        psi *= kick
        psi = sfft.ifft(sfft.fft(psi, axis=-1) * drift, axis=-1)
        psi *= kick
        if observer is not None and ((k + 1) % every == 0 or k + 1 == n):
            observer(k + 1, t0 + (k + 1) * h, psi)
    return psi


def propagate(psi: WaveFunction, potential: Callable, t0: float, t1: float, dt: float,
              observer: Optional[Callable] = None, every: int = 1) -> WaveFunction:
    return WaveFunction(psi.grid, split_step(psi.amps, psi.grid, potential, t0, t1, dt, observer, every))


def check_momentum_support(amps: np.ndarray, grid: Grid) -> float:
    """Largest |phi(p)| beyond 0.9 p_max relative to the peak; warns above 1e-8."""
    phi = np.abs(sfft.fft(amps, axis=-1))
    outer = np.abs(grid.p) > ALIAS_FRACTION * grid.p_max
    ratio = float(np.max(phi[..., outer]) / np.max(phi))
    if ratio > ALIAS_LEVEL:
        warnings.warn(
            f"momentum amplitude {ratio:.2e} of peak near the grid cutoff; refine pts_per_site",
            ResolutionWarning,
            stacklevel=2,
        )
    return ratio


# --- observables ------------------------------------------------------------

def apply_h(amps: np.ndarray, grid: Grid, u: np.ndarray) -> np.ndarray:
    return sfft.ifft(grid.p**2 * sfft.fft(amps, axis=-1), axis=-1) + u * amps


def energy_moments(amps: np.ndarray, grid: Grid, u: np.ndarray):
    """(<H>, <H^2>) with two spectral applications of H; batch-aware."""
    hpsi = apply_h(amps, grid, u)
    norm = np.sum(np.abs(amps) ** 2, axis=-1)
    e1 = np.real(np.sum(np.conj(amps) * hpsi, axis=-1)) / norm
    e2 = np.sum(np.abs(hpsi) ** 2, axis=-1) / norm
    return e1, e2


def energy_spread_now(amps, grid, u):
    """||(H - <H>) psi|| / ||psi||, which avoids cancelling <H^2> against <H>^2."""
    hpsi = apply_h(amps, grid, u)
    norm = np.sum(np.abs(amps) ** 2, axis=-1)
    e1 = np.real(np.sum(np.conj(amps) * hpsi, axis=-1)) / norm
    resid = hpsi - np.asarray(e1)[..., None] * amps
    return np.sqrt(np.sum(np.abs(resid) ** 2, axis=-1) / norm)


def fidelity(psi: WaveFunction, target: WaveFunction) -> float:
    return abs(target.overlap(psi)) ** 2


def overlaps(amps: np.ndarray, target: np.ndarray, grid: Grid):
    return np.sum(np.conj(target) * amps, axis=-1) * grid.dx


# --- ground states ----------------------------------------------------------

IMAG_SCHEDULE = (2e-2, 4e-3, 8e-4, 1.6e-4, 3.2e-5)
VARIANCE_FLOOR = 1e-11


@lru_cache(maxsize=256)
def _ground_amps(grid: Grid, u0: float, well: str, tol: float, max_steps: int) -> np.ndarray:
    omega = 2 * math.sqrt(u0)
    x = grid.x
    psi = np.exp(-omega * x**2 / 2).astype(complex)
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)
    u = well_potential(grid, u0, 0.0, well)
    used = 0
    chunk = 50
    for h in IMAG_SCHEDULE:
        kick = np.exp(-0.5 * h * u)
        drift = np.exp(-grid.p**2 * h)
        e_prev, var_prev = None, math.inf
        while True:
            for _ in range(chunk):
                psi = kick * sfft.ifft(drift * sfft.fft(kick * psi))
                psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * grid.dx)
            used += chunk
            e, e2 = energy_moments(psi, grid, u)
            var = e2 - e * e
            # energy settles quadratically before the state does; also wait
            # for the variance (residual of the eigen-equation) to stall
            if e_prev is not None and abs(e - e_prev) / chunk < tol and (
                var < VARIANCE_FLOOR or var > 0.98 * var_prev
            ):
                break
            e_prev, var_prev = e, var
            if used > max_steps:
                raise ConvergenceError(f"imaginary-time relaxation did not converge in {max_steps} steps")
    # ground state of a real Hamiltonian is real up to a global phase
    psi = psi * np.exp(-1j * np.angle(psi[grid.n // 2]))
    psi.setflags(write=False)
    return psi


def ground_state(grid: Grid, params: LatticeParams, site: int = 0, offset: float = 0.0,
                 well: str = "lattice", tol: float = 1e-12, max_steps: int = 400_000) -> WaveFunction:
    """Lowest state of the well centred at ``offset + site*pi``.

    Relaxed in imaginary time from a Gaussian seed with a decreasing step
    schedule, so the splitting bias ends well below the convergence tolerance.
    """
    if params.u0 < 10 and well == "lattice":
        warnings.warn("u0 < 10: site-localized ground state is not well defined", stacklevel=2)
    base = _ground_amps(grid, float(params.u0), well, tol, max_steps)
    return WaveFunction(grid, shift(base, grid, offset + site * SITE))


def site_ground_states(grid: Grid, params: LatticeParams, offset: float = 0.0, well: str = "lattice") -> np.ndarray:
    """Ground states of every site in the periodic box, shape (n_sites, N)."""
    g = ground_state(grid, params, 0, offset, well).amps
    return np.stack([np.roll(g, m * grid.pts_per_site) for m in range(grid.n_sites)])


# --- transport --------------------------------------------------------------

def detection_fidelity(amps: np.ndarray, grid: Grid, params: LatticeParams, offset: float,
                       well: str = "lattice") -> float:
    """Ground-band population summed over every site of the grid."""
    states = site_ground_states(grid, params, offset, well)
    return float(np.sum(np.abs(states.conj() @ amps * grid.dx) ** 2))


def ground_band_population(psi: WaveFunction, params: LatticeParams, final_offset: float,
                           well: str = "lattice") -> float:
    return detection_fidelity(psi.amps, psi.grid, params, final_offset, well)


@dataclass
class TransportResult:
    fidelity: float
    detection_fidelity: float
    final: WaveFunction
    dt: float


def transport_amps(psi0: np.ndarray, grid: Grid, u0, positions: Callable, t0: float, t1: float, dt: float,
                   well: str = "lattice", observer=None, every: int = 1) -> np.ndarray:
    pot = ConveyorPotential(grid, u0, positions, well)
    return split_step(psi0, grid, pot, t0, t1, dt, observer, every)


def transport(traj, params: LatticeParams, grid: Optional[Grid] = None, dt: Optional[float] = None,
              well: str = "lattice", observer=None, every: int = 1) -> TransportResult:
    """Carry the initial ground state along ``traj`` and score it."""
    grid = grid or default_grid(traj.tau, params)
    dt = dt or default_dt(params)
    t0, t1 = traj.span
    psi0 = ground_state(grid, params, 0, float(traj.position(t0)), well)
    final = transport_amps(psi0.amps, grid, params.u0, traj.position, t0, t1, dt, well, observer, every)
    end = float(traj.position(t1))
    target = ground_state(grid, params, 0, end, well).amps
    f = float(abs(overlaps(final, target, grid)) ** 2)
    det = detection_fidelity(final, grid, params, end, well)
    check_momentum_support(final, grid)
    return TransportResult(f, det, WaveFunction(grid, final), dt)


def converged_transport(traj, params: LatticeParams, grid: Optional[Grid] = None, dt: Optional[float] = None,
                        tol: float = 1e-5, max_halvings: int = 3, well: str = "lattice") -> TransportResult:
    """Transport with dt halving until the fidelity moves by less than ``tol``."""
    dt = dt or default_dt(params)
    res = transport(traj, params, grid, dt, well)
    for _ in range(max_halvings):
        finer = transport(traj, params, grid, dt / 2, well)
        if abs(finer.fidelity - res.fidelity) < tol:
            return finer
        res, dt = finer, dt / 2
    warnings.warn(f"fidelity not converged in dt after {max_halvings} halvings", ResolutionWarning, stacklevel=2)
    return res


def batch_fidelities(traj_positions: Callable, span, d: float, grid: Grid, params_list, dt: float,
                     well: str = "lattice"):
    """Fidelities for a batch of (trajectory, depth) pairs advancing together.

    ``traj_positions(t)`` returns shape (B,); ``params_list`` holds one
    LatticeParams per batch member (or a single one shared by all).
    """
    if isinstance(params_list, LatticeParams):
        params_list = None, params_list
    t0, t1 = span
    if params_list[0] is None:
        p = params_list[1]
        g0 = ground_state(grid, p, 0, 0.0, well).amps
        psi0 = np.broadcast_to(g0, (len(np.atleast_1d(traj_positions(t0))), grid.n))
        u0 = p.u0
        target = shift(g0, grid, d)
        final = transport_amps(psi0, grid, u0, traj_positions, t0, t1, dt, well)
        return np.abs(overlaps(final, target, grid)) ** 2, final
    psi0 = np.stack([ground_state(grid, p, 0, 0.0, well).amps for p in params_list])
    target = shift(psi0, grid, d)
    u0 = np.array([p.u0 for p in params_list])
    final = transport_amps(psi0, grid, u0, traj_positions, t0, t1, dt, well)
    return np.abs(overlaps(final, target, grid)) ** 2, final


# --- thermal averaging -------------------------------------------------------

@dataclass(frozen=True)
class ThermalConfig:
    t_perp_uk: float = 1.0
    omega_perp_hz: float = 1000.0
    waist_um: float = 20.0
    n_radii: int = 10

    def __post_init__(self):
        if self.t_perp_uk < 0 or self.omega_perp_hz <= 0 or self.waist_um <= 0:
            raise ValueError("thermal parameters must be positive")
        if self.n_radii < 2:
            raise ValueError("need at least two radial points")

    @property
    def sigma_um(self) -> float:
        """Rms radius of the transverse Boltzmann distribution, sqrt(kT/m)/omega."""
        w = 2 * math.pi * self.omega_perp_hz
        return math.sqrt(constants.k * self.t_perp_uk * 1e-6 / CESIUM_MASS) / w * 1e6

    def density(self, r_um):
        s2 = self.sigma_um**2
        r = np.asarray(r_um, dtype=float)
        return r / s2 * np.exp(-(r**2) / (2 * s2))

    @property
    def r_max_um(self) -> float:
        """Radius beyond the mode where the density falls to 1e-6 of its peak."""
        s = self.sigma_um
        peak = self.density(s)
        return brentq(lambda r: self.density(r) - 1e-6 * peak, s, 50 * s)

    def quadrature(self, n_radii: Optional[int] = None):
        """Radii and trapezoid weights over [0, r_max], rescaled to sum to one."""
        n = n_radii or self.n_radii
        r = np.linspace(0.0, self.r_max_um, n)
        w = np.full(n, r[1] - r[0])
        w[[0, -1]] *= 0.5
        w = w * self.density(r)
        return r, w / w.sum()

    def depth_at(self, u0: float, r_um):
        return u0 * np.exp(-2 * np.asarray(r_um) ** 2 / self.waist_um**2)


def thermal_fidelity(traj, params: LatticeParams, thermal: ThermalConfig, grid: Optional[Grid] = None,
                     dt: Optional[float] = None, n_radii: Optional[int] = None, well: str = "lattice") -> float:
    """Fidelity averaged over the transverse position distribution."""
    grid = grid or default_grid(traj.tau, params)
    dt = dt or default_dt(params)
    if thermal.t_perp_uk == 0:
        return transport(traj, params, grid, dt, well).fidelity
    r, w = thermal.quadrature(n_radii)
    depths = thermal.depth_at(params.u0, r)
    plist = [params.with_depth(float(u)) for u in depths]

    def positions(t):
        return np.full(len(plist), float(traj.position(t)))

    f, _ = batch_fidelities(positions, traj.span, traj.d, grid, plist, dt, well)
    return float(np.dot(w, f))


# --- interferometer ---------------------------------------------------------

@dataclass
class InterferometerResult:
    contrast: float
    sqrt_f2: float
    spin_down_return: float


class _TwoArmPotential:
    """Row 0: spin-up conveyor; row 1: spin-down lattice from the phasor sum."""

    def __init__(self, grid, u0, positions, field: SpinDownField, phi_l_of_t):
        self.grid, self.u0, self.positions, self.field, self.phi_l = grid, u0, positions, field, phi_l_of_t

    def __call__(self, t):
        x_up = float(self.positions(t))
        up = well_potential(self.grid, self.u0, x_up)
        f = self.field.with_phases(phi_l=self.phi_l(t), phi_r=lattice.phase_for_position(x_up, self.field.phi_0))
        depth, offset, pos = lattice.spin_down_lattice(f)
        down = well_potential(self.grid, depth, pos) - offset
        return np.stack([up, down])


def interferometer_contrast(traj, params: LatticeParams, field: Optional[SpinDownField] = None,
                            compensate: bool = True, grid: Optional[Grid] = None,
                            dt: Optional[float] = None) -> InterferometerResult:
    """Spin-up arm carried out and back along ``traj``; spin-down arm held.

    Returns |<psi_down(2 tau)|psi_up(2 tau)>| and sqrt(F2) with
    F2 = |<psi_init|psi_up(2 tau)>|^2.
    """
    tau = traj.tau
    grid = grid or default_grid(tau, params)
    dt = dt or default_dt(params)
    field = field or SpinDownField(i_l=params.u0, i_r=params.u0)
    if not math.isclose(field.i_r, params.u0, rel_tol=1e-9):
        raise ValueError("spin-up depth is alpha*I_R; set field.i_r = params.u0")

    def positions(t):
        return traj.position(t if t <= tau else 2 * tau - t)

    x_down0 = float(lattice.spin_down_lattice(field.with_phases(phi_r=lattice.phase_for_position(0.0, field.phi_0)))[2])
    if compensate:
        n, h = _steps(0.0, tau, dt)
        t_mid = np.concatenate([(np.arange(n) + 0.5) * h, tau + (np.arange(n) + 0.5) * h])
        t_all = np.concatenate([[0.0], t_mid, [2 * tau]])
        phi_r = lattice.phase_for_position(np.array([positions(t) for t in t_all]), field.phi_0)
        ramp = lattice.compensation_ramp(phi_r, field, x_down0)

        def phi_l(t):
            return float(np.interp(t, t_all, ramp))
    else:
        def phi_l(t):
            return field.phi_l

    f0 = field.with_phases(phi_l=phi_l(0.0), phi_r=lattice.phase_for_position(0.0, field.phi_0))
    depth0, _, pos0 = lattice.spin_down_lattice(f0)
    up0 = ground_state(grid, params, 0, 0.0).amps
    down0 = ground_state(grid, params.with_depth(float(depth0)), 0, float(pos0)).amps
    pot = _TwoArmPotential(grid, params.u0, positions, field, phi_l)
    psi = np.stack([up0, down0])
    psi = split_step(psi, grid, pot, 0.0, tau, dt)
    psi = split_step(psi, grid, pot, tau, 2 * tau, dt)
    c = abs(np.vdot(psi[1], psi[0]) * grid.dx)
    f2 = abs(np.vdot(up0, psi[0]) * grid.dx) ** 2
    back = abs(np.vdot(down0, psi[1]) * grid.dx) ** 2
    return InterferometerResult(float(c), float(math.sqrt(f2)), float(back))
