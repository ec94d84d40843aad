"""Fubini-Study path lengths, energy spreads and the speed-limit bounds built from them."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dynamics import (
    ConveyorPotential,
    Grid,
    WaveFunction,
    default_dt,
    default_grid,
    energy_spread_now,
    ground_state,
    overlaps,
    shift,
    split_step,
)
from .lattice import SITE, LatticeParams
from .protocols import tau_cb

MIN_ADJACENT_OVERLAP = 0.99
DEFAULT_EVERY = 4


class ResolutionError(ValueError):
    """Adjacent states too far apart for a faithful path-length sum."""


def _as_rows(states, grid: Optional[Grid] = None):
    if isinstance(states, np.ndarray):
        if grid is None:
            raise ValueError("a grid is needed for raw amplitude arrays")
        return states, grid
    states = list(states)
    if not states:
        raise ValueError("no states given")
    return np.stack([s.amps for s in states]), states[0].grid


def _normalize(rows, dx):
    return rows / np.sqrt(np.sum(np.abs(rows) ** 2, axis=-1, keepdims=True) * dx)


def fs_increments(states, grid: Optional[Grid] = None) -> np.ndarray:
    """Geodesic distances arccos|<psi_k+1|psi_k>| between neighbours.

    Evaluated as 2 asin(|a - e^{i phi} b| / 2) with the relative phase removed,
    which keeps full precision when the overlap is close to one.
    """
    rows, grid = _as_rows(states, grid)
    if len(rows) < 2:
        raise ValueError("need at least two states")
    rows = _normalize(rows, grid.dx)
    a, b = rows[1:], rows[:-1]
    ov = np.sum(np.conj(b) * a, axis=-1) * grid.dx
    phase = np.where(np.abs(ov) > 0, ov / np.maximum(np.abs(ov), 1e-300), 1.0)
    chord = np.sqrt(np.sum(np.abs(a - phase[:, None] * b) ** 2, axis=-1) * grid.dx)
    return 2 * np.arcsin(np.clip(chord / 2, 0.0, 1.0)), np.abs(ov)


def path_length(states, grid: Optional[Grid] = None, min_overlap: float = MIN_ADJACENT_OVERLAP) -> float:
    """Fubini-Study length of a time-ordered state sequence."""
    inc, ov = fs_increments(states, grid)
    if np.min(ov) < min_overlap:
        raise ResolutionError(f"adjacent overlap {np.min(ov):.4f} below {min_overlap}; sample more densely")
    return float(np.sum(inc))


def energy_spread(states, potentials, times, grid: Optional[Grid] = None) -> float:
    """Trapezoid time average of the instantaneous energy uncertainty.

    ``potentials`` is an array matching ``states`` row by row, or a callable
    returning U on the grid at a given time.
    """
    rows, grid = _as_rows(states, grid)
    times = np.asarray(times, dtype=float)
    if callable(potentials):
        potentials = np.stack([potentials(t) for t in times])
    spread = instantaneous_spread(rows, np.asarray(potentials), grid)
    if len(times) == 1 or times[-1] == times[0]:
        return float(spread[0])
    return float(np.trapezoid(spread, times) / (times[-1] - times[0]))


def instantaneous_spread(rows, potentials, grid: Grid) -> np.ndarray:
    return energy_spread_now(rows, grid, potentials)


def f_factor(xi):
    """sqrt(1 + xi^2) + xi^2 arccsch(xi); equals 1 at xi = 0 and grows monotonically."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0) or np.any(np.isnan(xi)):
        raise ValueError("f_factor is defined for xi >= 0")
    safe = np.where(xi > 0, xi, 1.0)
    tail = np.where(xi > 0, safe**2 * np.arcsinh(1.0 / safe), 0.0)
    out = np.sqrt(1.0 + xi**2) + tail
    return float(out) if out.ndim == 0 else out


def l_qgt(d: float, params: LatticeParams) -> float:
    """Displaced-ground-state geodesic length d * Delta p (harmonic width)."""
    if d <= 0:
        raise ValueError("transport distance must be positive")
    return d * params.delta_p


def l_qgt_numeric(d: float, params: LatticeParams, grid: Grid = Grid(), n_steps: int = 2000) -> float:
    """Integral of ds_QGT along rigid displacements of the numeric ground state.

    Displacing by a fixed small step gives the same overlap everywhere, so
    the integral is n_steps times a single increment.
    """
    if d <= 0:
        raise ValueError("transport distance must be positive")
    psi = ground_state(grid, params).amps
    step = d / n_steps
    ov = abs(overlaps(shift(psi, grid, step), psi, grid))
    return float(n_steps * math.sqrt(max(1.0 - ov**2, 0.0)))


def l_qb_estimate(d: float, tau: float, params: LatticeParams) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return l_qgt(d, params) * f_factor(params.tau_ho / (math.pi * tau))


def delta_e_upper(d: float, tau: float, params: LatticeParams) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = d / SITE
    return l_qgt(d, params) / tau * f_factor(tau / (2 * n * params.tau_ho))


def geodesic_length(psi_init: WaveFunction, psi_target: WaveFunction) -> float:
    ov = abs(psi_init.normalized().overlap(psi_target.normalized()))
    return math.acos(min(1.0, ov))


def mandelstam_tamm_time(psi_init: WaveFunction, psi_target: WaveFunction, delta_e: float) -> float:
    """ell_geo / Delta E; infinite when the state has no energy spread."""
    if delta_e < 0:
        raise ValueError("energy spread cannot be negative")
    ell_geo = geodesic_length(psi_init, psi_target)
    if delta_e == 0:
        return math.inf
    return ell_geo / delta_e


# --- coherent-state model of a brachistochrone -------------------------------

def qb_position(t, d: float, tau: float):
    """Constant acceleration up to tau/2, then constant deceleration."""
    s = np.clip(np.asarray(t, dtype=float) / tau, 0.0, 1.0)
    return np.where(s < 0.5, 2 * d * s**2, -d + 4 * d * s - 2 * d * s**2)


def qb_velocity(t, d: float, tau: float):
    s = np.clip(np.asarray(t, dtype=float) / tau, 0.0, 1.0)
    return np.where(s < 0.5, 4 * d * s / tau, 4 * d * (1 - s) / tau)


def qb_acceleration(t, d: float, tau: float):
    s = np.asarray(t, dtype=float) / tau
    return np.where(s < 0.5, 4 * d / tau**2, -4 * d / tau**2)


@dataclass
class CoherentModel:
    t: np.ndarray
    x: np.ndarray
    alpha: np.ndarray
    ell: float
    ell_closed: float


def coherent_model(d: float, tau: float, params: LatticeParams, n_points: int = 20001) -> CoherentModel:
    """Coherent state riding the constant-acceleration mean path.

    Re(alpha) = x / (2 dx), Im(alpha) = m v / (2 dp) with m = 1/2; the path
    length is the quadrature of |d alpha / dt|.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    dx, dp = params.delta_x, params.delta_p
    t = np.linspace(0.0, tau, n_points)
    x = qb_position(t, d, tau)
    v = qb_velocity(t, d, tau)
    alpha = x / (2 * dx) + 1j * 0.5 * v / (2 * dp)
    speed = np.abs(v / (2 * dx) + 1j * 0.5 * qb_acceleration(t, d, tau) / (2 * dp))
    # each half is smooth; integrate them separately around the kink
    half = n_points // 2
    ell = np.trapezoid(speed[: half + 1], t[: half + 1])
    tail = speed[half:].copy()
    tail[0] = np.abs(v[half] / (2 * dx) - 1j * 0.5 * 4 * d / tau**2 / (2 * dp))
    ell += np.trapezoid(tail, t[half:])
    return CoherentModel(t, x, alpha, float(ell), l_qb_estimate(d, tau, params))


# --- run logs and reports ----------------------------------------------------

@dataclass
class RunLog:
    """States recorded along a transport together with what produced them."""
    times: np.ndarray
    states: np.ndarray
    potentials: np.ndarray
    grid: Grid
    params: LatticeParams
    tau: float
    d: float
    fidelity: float
    every: int
    dt: float
    potentials_left: Optional[np.ndarray] = None  # left limits, differ from ``potentials`` only at jumps

    def spread_average(self) -> float:
        """Time-averaged energy spread with each trapezoid panel using its own one-sided Hamiltonian."""
        right = instantaneous_spread(self.states, self.potentials, self.grid)
        if self.potentials_left is None:
            node = right
        else:
            left = instantaneous_spread(self.states, self.potentials_left, self.grid)
            node = 0.5 * (left + right)
            node[0], node[-1] = right[0], left[-1]
        return float(np.trapezoid(node, self.times) / (self.times[-1] - self.times[0]))


def record_transport(traj, params: LatticeParams, grid: Optional[Grid] = None, dt: Optional[float] = None,
                     every: int = DEFAULT_EVERY, well: str = "lattice") -> RunLog:
    """Propagate ``traj`` keeping every ``every``-th state; halves ``every`` while too coarse."""
    grid = grid or default_grid(traj.tau, params)
    dt = dt or default_dt(params)
    t0, t1 = traj.span
    psi0 = ground_state(grid, params, 0, float(traj.position(t0)), well).amps
    pot = ConveyorPotential(grid, params.u0, traj.position, well)
    while True:
        times, rows = [], []

        def keep(k, t, psi):
            times.append(t)
            rows.append(psi.copy())

        final = split_step(psi0, grid, pot, t0, t1, dt, keep, every)
        rows_arr = np.stack(rows)
        _, ov = fs_increments(rows_arr, grid)
        if np.min(ov) >= MIN_ADJACENT_OVERLAP or every == 1:
            break
        every = max(1, every // 2)
    times = np.array(times)
    eps = 1e-9 * dt
    potentials = np.stack([pot(t + eps) for t in times])
    potentials_left = np.stack([pot(t - eps) for t in times])
    target = ground_state(grid, params, 0, float(traj.position(t1)), well).amps
    f = float(abs(overlaps(final, target, grid)) ** 2)
    return RunLog(times, rows_arr, potentials, grid, params, t1 - t0, float(traj.d), f, every, dt,
                  potentials_left)


@dataclass
class GeometryReport:
    ell: float
    delta_e: float
    ell_geo: float
    ell_qgt: float
    ell_qb_est: float
    delta_e_upper: float
    tau_mt: float
    aa_residual: float
    bound_flags: dict

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(log: RunLog) -> GeometryReport:
    if log is None or len(log.states) < 2:
        raise ValueError("bound_report needs a run with at least two recorded states")
    p, tau, d = log.params, log.tau, log.d
    ell = path_length(log.states, log.grid)
    de = log.spread_average()
    first = WaveFunction(log.grid, log.states[0])
    last = WaveFunction(log.grid, log.states[-1])
    target = first.shifted(d)
    ell_geo = geodesic_length(first, target)
    tau_mt = mandelstam_tamm_time(first, target, de)
    qgt = l_qgt(d, p)
    upper = delta_e_upper(d, tau, p)
    flags = {
        "ell_above_qgt": bool(ell >= qgt),
        "tau_above_cb": bool(tau >= tau_cb(d, p)),
        "delta_e_below_upper": bool(de < upper),
        "tau_above_mt": bool(tau > tau_mt),
        "ell_over_geo": ell / ell_geo if ell_geo > 0 else math.inf,
        "final_fidelity": log.fidelity,
        "final_overlap_geo": geodesic_length(last, target),
    }
    return GeometryReport(
        ell=ell,
        delta_e=de,
        ell_geo=ell_geo,
        ell_qgt=qgt,
        ell_qb_est=l_qb_estimate(d, tau, p),
        delta_e_upper=upper,
        tau_mt=tau_mt,
        aa_residual=abs(ell - de * tau) / ell if ell > 0 else 0.0,
        bound_flags=flags,
    )


def kinetic_potential_spread(log: RunLog):
    """Time-averaged kinetic and potential contributions dp |v| and dx |U'| at the packet centre."""
    g, p = log.grid, log.params
    w = np.abs(log.states) ** 2 * g.dx
    mean_x = np.sum(w * g.x, axis=-1) / np.sum(w, axis=-1)
    v = np.gradient(mean_x, log.times)
    # slope of the trap potential at the packet centre, by spectral differentiation
    slope = np.real(np.fft.ifft(1j * g.p * np.fft.fft(log.potentials, axis=-1), axis=-1))
    at_centre = np.array([np.interp(m, g.x, s) for m, s in zip(mean_x, slope)])
    dk = p.delta_p * np.abs(v)
    du = p.delta_x * np.abs(at_centre)
    span = log.times[-1] - log.times[0]
    return float(np.trapezoid(dk, log.times) / span), float(np.trapezoid(du, log.times) / span)


def refinement_change(traj, params: LatticeParams, grid: Optional[Grid] = None, dt: Optional[float] = None,
                      every: int = DEFAULT_EVERY) -> tuple[float, float]:
    """Relative change of (ell, Delta E) when the state sampling is doubled."""
    coarse = record_transport(traj, params, grid, dt, every)
    fine = record_transport(traj, params, grid, dt, max(1, coarse.every // 2))
    if fine.every == coarse.every:
        return 0.0, 0.0
    a, b = bound_report(coarse), bound_report(fine)
    return abs(a.ell - b.ell) / b.ell, abs(a.delta_e - b.delta_e) / b.delta_e
