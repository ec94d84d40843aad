"""Fidelity maximization over band-limited sine-series trajectories."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft
from scipy.optimize import minimize

from . import protocols
from .dynamics import (
    Grid,
    ThermalConfig,
    default_dt,
    default_grid,
    ground_state,
    shift,
    transport,
    thermal_fidelity,
)
from .lattice import SITE, LatticeParams, controlled_level_count
from .protocols import FeasibilityLimits, Trajectory

SEARCH_RADII = 5


@dataclass(frozen=True)
class OptimizerConfig:
    j_max: Optional[int] = None  # None: derived from the control bandwidth
    even_only: bool = True
    penalty_weight: float = 100.0
    max_evals: int = 6000  # trajectory propagations, gradient batches included
    restarts: int = 0
    seed: int = 0
    tol: float = 1e-5
    fd_step: float = 1e-6
    polish_evals: int = 150
    restart_scale: float = 0.05

    def __post_init__(self):
        if self.j_max is not None and self.j_max < 2:
            raise ValueError("j_max must be at least 2")
        if self.max_evals <= 0 or self.restarts < 0 or self.polish_evals < 0:
            raise ValueError("optimizer budgets must be positive")


@dataclass
class OptimResult:
    coeffs: np.ndarray
    fidelity: float
    detection_fidelity: float
    evals: int
    feasible: bool
    trace: list = field(default_factory=list)
    tau: float = 0.0
    d: float = SITE
    budget_exhausted: bool = False
    seed_fidelity: float = float("nan")

    @property
    def trajectory(self) -> Trajectory:
        return protocols.fourier(self.coeffs, self.d, self.tau)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "d": self.d,
            "coefficients": [float(c) for c in self.coeffs],
            "fidelity": self.fidelity,
            "detection_fidelity": self.detection_fidelity,
            "seed_fidelity": self.seed_fidelity,
            "evals": self.evals,
            "feasible": self.feasible,
            "budget_exhausted": self.budget_exhausted,
            "trace": [float(f) for f in self.trace],
        }


class BudgetExhausted(Exception):
    pass


class TransportObjective:
    """Batched fidelity of sine-series trajectories on a fixed time grid.

    Only the free coefficients (even j when ``even_only``) are exposed. The
    constant part of the lattice potential is dropped since it only adds a
    global phase.
    """

    def __init__(self, tau: float, d: float, params: LatticeParams, j_max: int, even_only: bool = True,
                 grid: Optional[Grid] = None, dt: Optional[float] = None,
                 thermal: Optional[ThermalConfig] = None, n_radii: int = SEARCH_RADII):
        self.tau, self.d, self.params, self.j_max = tau, d, params, j_max
        self.grid = grid or default_grid(tau, params)
        dt = dt or default_dt(params)
        n = max(2, int(math.ceil(tau / dt - 1e-9)))
        n += n % 2
        self.h = tau / n
        self.t_mid = (np.arange(n) + 0.5) * self.h
        js = np.arange(1, j_max + 1)
        self.free = js[js % 2 == 0] if even_only else js
        nu = np.pi * self.free / tau
        self.basis = np.sin(np.outer(self.t_mid, nu))  # (steps, free)
        self.base = 0.5 * d * (1 - np.cos(np.pi * self.t_mid / tau))
        tv = np.linspace(0.0, tau, 1025)
        self.vbasis = np.cos(np.outer(tv, nu)) * nu
        self.vbase = 0.5 * d * np.pi / tau * np.sin(np.pi * tv / tau)

        if thermal is not None and thermal.t_perp_uk > 0:
            r, w = thermal.quadrature(n_radii)
            self.depths = thermal.depth_at(params.u0, r)
            self.weights = w
        else:
            self.depths = np.array([params.u0])
            self.weights = np.array([1.0])
        gs = [ground_state(self.grid, params.with_depth(float(u))).amps for u in self.depths]
        self.psi0 = np.stack(gs)
        self.target = shift(self.psi0, self.grid, d)
        self.drift = np.exp(-1j * self.grid.p**2 * self.h)
        self.evals = 0

    def full_coeffs(self, free_coeffs) -> np.ndarray:
        out = np.zeros(self.j_max)
        out[self.free - 1] = free_coeffs
        return out

    def fidelities(self, c: np.ndarray) -> np.ndarray:
        """Weighted fidelity for each row of free coefficients ``c`` (B, n_free)."""
        c = np.atleast_2d(c)
        b = len(c)
        r = len(self.depths)
        xs = self.base + c @ self.basis.T  # (B, steps)
        cos2 = np.repeat(np.cos(2 * xs), r, axis=0)
        sin2 = np.repeat(np.sin(2 * xs), r, axis=0)
        theta = np.tile(0.25 * self.h * self.depths, b)[:, None]
        psi = np.tile(self.psi0, (b, 1)).astype(complex)
        g = self.grid
        for k in range(len(self.t_mid)):
            kick = np.exp(1j * theta * (g.cos2x * cos2[:, k : k + 1] + g.sin2x * sin2[:, k : k + 1]))
            psi *= kick
            psi = sfft.ifft(sfft.fft(psi, axis=-1) * self.drift, axis=-1)
            psi *= kick
        ov = np.sum(np.conj(np.tile(self.target, (b, 1))) * psi, axis=-1) * g.dx
        f = (np.abs(ov) ** 2).reshape(b, r)
        self.evals += b
        return f @ self.weights

    def slew_excess(self, c: np.ndarray, v_max: float) -> np.ndarray:
        v = self.vbase + np.atleast_2d(c) @ self.vbasis.T
        return np.maximum(np.abs(v) / v_max - 1.0, 0.0)


def _initial_coeffs(tau, d, params, j_max, even_only):
    try:
        ansatz = protocols.classical_ansatz(d, tau, params)
    except protocols.InfeasibleTrajectory:
        ansatz = protocols.linear(d, tau)
    return protocols.project_to_fourier(ansatz, j_max, even_only).coefficients


def _clip_slew(coeffs, tau, d, v_max):
    """Shrink the wiggles until the trap speed respects the slew limit."""
    free = np.asarray(coeffs, dtype=float)
    tv = np.linspace(0.0, tau, 2049)
    for _ in range(60):
        v = protocols.fourier_velocity(free, d, tau, tv)
        if np.max(np.abs(v)) <= v_max:
            return free
        free = 0.9 * free
    return free


def optimize(tau: float, d: float, params: LatticeParams, thermal: Optional[ThermalConfig] = None,
             config: OptimizerConfig = OptimizerConfig(), limits: FeasibilityLimits = FeasibilityLimits(),
             grid: Optional[Grid] = None, dt: Optional[float] = None,
             init: Optional[np.ndarray] = None) -> OptimResult:
    """Maximize transport fidelity at fixed duration ``tau``.

    Quasi-Newton (L-BFGS-B) ascent on forward-difference gradients, one
    batched propagation per gradient, with a quadratic penalty on slew-rate
    violations; then a Nelder-Mead polish. ``init`` seeds the full coefficient
    vector; otherwise the classical ansatz is projected onto the series.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if config.j_max is not None else "default")
        j_max = config.j_max or protocols.default_j_max(tau, params, limits)
    if config.even_only and j_max % 2:
        j_max -= 1
    obj = TransportObjective(tau, d, params, j_max, config.even_only, grid, dt, thermal)
    v_max = protocols.velocity_limit(limits, params)

    if init is None:
        init = _initial_coeffs(tau, d, params, j_max, config.even_only)
    init = np.asarray(init, dtype=float)[:j_max]
    init = np.pad(init, (0, j_max - len(init)))
    x0 = init[obj.free - 1]
    seed_f = float(obj.fidelities(x0)[0])

    trace = []
    best = {"f": -1.0, "x": x0.copy(), "feasible_f": -1.0, "feasible_x": None}
    weight = {"w": config.penalty_weight}

    def record(xs, fs):
        excess = obj.slew_excess(xs, v_max)
        for x, f, ex in zip(np.atleast_2d(xs), fs, excess):
            if f > best["f"]:
                best["f"], best["x"] = float(f), x.copy()
            if not np.any(ex > 1e-9) and f > best["feasible_f"]:
                best["feasible_f"], best["feasible_x"] = float(f), x.copy()
        trace.append(max(best["feasible_f"], 0.0) if best["feasible_x"] is not None else best["f"])

    def penalty(xs):
        ex = obj.slew_excess(xs, v_max)
        return weight["w"] * np.mean(ex**2, axis=-1)

    def value_and_grad(x):
        if obj.evals >= config.max_evals:
            raise BudgetExhausted
        n = len(x)
        h = config.fd_step
        xs = np.vstack([x, x + h * np.eye(n)])
        fs = obj.fidelities(xs)
        record(xs[:1], fs[:1])
        vals = (1.0 - fs) + penalty(xs)
        return float(vals[0]), (vals[1:] - vals[0]) / h

    def value(x):
        if obj.evals >= config.max_evals:
            raise BudgetExhausted
        f = obj.fidelities(x)
        record(x[None, :], f)
        return float(1.0 - f[0] + penalty(x[None, :])[0])

    record(x0[None, :], np.array([seed_f]))
    rng = np.random.default_rng(config.seed)
    exhausted = False
    starts = [x0] + [None] * config.restarts
    for i, start in enumerate(starts):
        if start is None:
            scale = config.restart_scale * (np.abs(best["x"]).max() + 1e-3)
            start = best["x"] + rng.normal(scale=scale, size=len(x0))
        try:
            minimize(value_and_grad, start, jac=True, method="L-BFGS-B",
                     options={"maxiter": 10_000, "ftol": 1e-14, "gtol": 1e-12, "maxcor": 20})
        except BudgetExhausted:
            exhausted = True
            break
    if not exhausted and config.polish_evals:
        start = best["feasible_x"] if best["feasible_x"] is not None else best["x"]
        span = 0.02 * (np.abs(start).max() + 1e-3)
        simplex = np.vstack([start, start + span * np.eye(len(start))])
        try:
            minimize(value, start, method="Nelder-Mead",
                     options={"maxfev": config.polish_evals, "initial_simplex": simplex,
                              "xatol": 1e-9, "fatol": 1e-12})
        except BudgetExhausted:
            exhausted = True

    if best["feasible_x"] is None:
        # project the best point back into the slew limit
        xf = _clip_slew(obj.full_coeffs(best["x"]), tau, d, v_max)[obj.free - 1]
        f = float(obj.fidelities(xf)[0])
        record(xf[None, :], np.array([f]))
    x_best = best["feasible_x"] if best["feasible_x"] is not None else best["x"]
    coeffs = obj.full_coeffs(x_best)
    traj = protocols.fourier(coeffs, d, tau)
    feasible = protocols.feasibility_check(traj, limits, params).slew_ok

    grid_eval = obj.grid
    if thermal is not None and thermal.t_perp_uk > 0:
        f_final = thermal_fidelity(traj, params, thermal, grid_eval, obj.h)
    else:
        f_final = best["feasible_f"] if best["feasible_x"] is not None else best["f"]
    det = transport(traj, params, grid_eval, obj.h).detection_fidelity
    return OptimResult(
        coeffs=coeffs,
        fidelity=float(f_final),
        detection_fidelity=float(det),
        evals=obj.evals,
        feasible=bool(feasible),
        trace=trace,
        tau=tau,
        d=d,
        budget_exhausted=exhausted,
        seed_fidelity=seed_f,
    )


def warm_start_chain(tau_list, d: float, params: LatticeParams, thermal: Optional[ThermalConfig] = None,
                     config: OptimizerConfig = OptimizerConfig(), limits: FeasibilityLimits = FeasibilityLimits(),
                     grid: Optional[Grid] = None, dt: Optional[float] = None) -> list[OptimResult]:
    """Optimize along decreasing durations, each run seeded by the previous optimum.

    The coefficients describe the shape in normalized time t / tau, so they
    carry over unchanged (padded or truncated when j_max differs).
    """
    tau_list = [float(t) for t in tau_list]
    if any(b >= a for a, b in zip(tau_list, tau_list[1:])):
        raise ValueError("tau_list must be strictly decreasing")
    results = []
    for tau in tau_list:
        init = results[-1].coeffs if results else None
        results.append(optimize(tau, d, params, thermal, config, limits, grid, dt, init=init))
    return results


def crossing(taus, values, threshold: float) -> float:
    """Duration where ``values`` first drops below ``threshold`` scanning from long to short tau.

    Linear interpolation between the bracketing grid points; nan when the
    scan never crosses.
    """
    order = np.argsort(taus)[::-1]
    t = np.asarray(taus, dtype=float)[order]
    v = np.asarray(values, dtype=float)[order]
    for i in range(len(t) - 1):
        if v[i] >= threshold > v[i + 1]:
            return float(t[i] + (threshold - v[i]) * (t[i + 1] - t[i]) / (v[i + 1] - v[i]))
    return math.nan


@dataclass
class QSLPoint:
    u0: float
    tau_ho: float
    tau_star: float  # detection fidelity crosses the threshold
    tau_high: float  # site-resolved fidelity first reaches HIGH_FIDELITY
    results: list
    controlled_levels: int

    @property
    def in_range(self) -> bool:
        return not math.isnan(self.tau_star)

    @property
    def ratio(self) -> float:
        return self.tau_star / self.tau_ho


HIGH_FIDELITY = 0.99


def scan_qsl(u0_list, tau_ratios, d: float = SITE, threshold: float = 0.5,
             config: OptimizerConfig = OptimizerConfig(), limits: FeasibilityLimits = FeasibilityLimits(),
             e_rec_hz: float = 2000.0, lambda_nm: Optional[float] = None, workers: int = 1) -> list[QSLPoint]:
    """Speed-limit transition for each depth from a warm-started scan down in tau."""
    ratios = sorted((float(r) for r in tau_ratios), reverse=True)
    jobs = [(float(u0), ratios, d, threshold, config, limits, e_rec_hz, lambda_nm) for u0 in u0_list]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_qsl_row, jobs))
    return [_qsl_row(job) for job in jobs]


def _qsl_row(job) -> QSLPoint:
    u0, ratios, d, threshold, config, limits, e_rec_hz, lambda_nm = job
    params = LatticeParams(u0, e_rec_hz, lambda_nm)
    taus = [r * params.tau_ho for r in ratios]
    results = warm_start_chain(taus, d, params, config=config, limits=limits)
    det = [r.detection_fidelity for r in results]
    fid = [r.fidelity for r in results]
    return QSLPoint(u0, params.tau_ho, crossing(taus, det, threshold), crossing(taus, fid, HIGH_FIDELITY),
                    results, controlled_level_count(params))
