"""Transport trajectories x_trap(t) and their feasibility checks."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .lattice import SITE, LatticeParams

KINDS = ("linear", "parabolic", "adiabatic_sine", "classical_ansatz", "fourier", "sampled")
PROJECTION_SAMPLES = 4096
J_MAX_CAP = 24


class InfeasibleTrajectory(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Conveyor-belt position as a function of time.

    Analytic kinds live on [0, tau] and are clamped to 0 before and ``d``
    after. ``coefficients[j-1]`` holds b_j of the sine series. Sampled
    trajectories are linearly interpolated and clamped at their end samples.
    """

    kind: str
    d: float
    tau: float
    coefficients: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None
    delta_x: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind == "fourier":
            object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        if self.kind == "sampled":
            t = np.asarray(self.times, dtype=float)
            x = np.asarray(self.positions, dtype=float)
            if t.shape != x.shape or t.ndim != 1 or len(t) < 2:
                raise ValueError("sampled trajectory needs matching 1-D times and positions")
            if np.any(np.diff(t) <= 0):
                raise ValueError("sample times must increase")
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "positions", x)

    @property
    def span(self):
        if self.kind == "sampled":
            return float(self.times[0]), float(self.times[-1])
        return 0.0, self.tau

    @property
    def j_max(self) -> int:
        return 0 if self.coefficients is None else len(self.coefficients)

    def __call__(self, t):
        return self.position(t)

    def position(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sampled":
            return np.interp(t, self.times, self.positions)
        d, tau = self.d, self.tau
        tc = np.clip(t, 0.0, tau)
        if self.kind == "linear":
            x = d * tc / tau
        elif self.kind == "parabolic":
            s = tc / tau
            x = np.where(s <= 0.5, 2 * d * s**2, d - 2 * d * (1 - s) ** 2)
        elif self.kind == "adiabatic_sine":
            x = -d / (2 * np.pi) * np.sin(2 * np.pi * tc / tau) + d * tc / tau
        elif self.kind == "classical_ansatz":
            s = tc / tau
            first = 2 * d * s**2 + self.delta_x
            second = d - 2 * d * (1 - s) ** 2 - self.delta_x
            x = np.where(s < 0.5, first, np.where(s > 0.5, second, 0.5 * d))
        else:
            x = fourier_eval(self.coefficients, d, tau, tc)
        return np.where(t <= 0, 0.0, np.where(t >= tau, d, x))

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sampled":
            v = np.diff(self.positions) / np.diff(self.times)
            idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(v) - 1)
            inside = (t >= self.times[0]) & (t < self.times[-1])
            return np.where(inside, v[idx], 0.0)
        d, tau = self.d, self.tau
        inside = (t > 0) & (t < tau)
        s = np.clip(t, 0.0, tau) / tau
        if self.kind == "linear":
            v = np.full_like(s, d / tau)
        elif self.kind in ("parabolic", "classical_ansatz"):
            v = np.where(s <= 0.5, 4 * d * s / tau, 4 * d * (1 - s) / tau)
        elif self.kind == "adiabatic_sine":
            v = d / tau * (1 - np.cos(2 * np.pi * s))
        else:
            v = fourier_velocity(self.coefficients, d, tau, s * tau)
        return np.where(inside, v, 0.0)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": float(self.d), "tau": float(self.tau)}
        if self.kind == "fourier":
            out["coefficients"] = [float(b) for b in self.coefficients]
        if self.kind == "classical_ansatz":
            out["delta_x"] = float(self.delta_x)
        if self.kind == "sampled":
            out["samples"] = [[float(a), float(b)] for a, b in zip(self.times, self.positions)]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        extra = set(data) - {"kind", "d", "tau", "coefficients", "samples", "delta_x"}
        if extra:
            raise ValueError(f"unknown trajectory keys: {sorted(extra)}")
        kind = data["kind"]
        kw = {}
        if kind == "fourier":
            kw["coefficients"] = np.asarray(data.get("coefficients", []), dtype=float)
        if kind == "classical_ansatz":
            kw["delta_x"] = float(data["delta_x"])
        if kind == "sampled":
            s = np.asarray(data["samples"], dtype=float)
            kw["times"], kw["positions"] = s[:, 0], s[:, 1]
        return cls(kind, float(data["d"]), float(data["tau"]), **kw)


def linear(d: float, tau: float) -> Trajectory:
    return Trajectory("linear", d, tau)


def parabolic(d: float, tau: float) -> Trajectory:
    """Constant acceleration a = 4d/tau^2 on the first half, -a on the second."""
    return Trajectory("parabolic", d, tau)


def adiabatic_sine(d: float, tau: float) -> Trajectory:
    return Trajectory("adiabatic_sine", d, tau)


def tau_cb(d: float, params: LatticeParams) -> float:
    """Classical brachistochrone time tau_HO * sqrt(2n/pi), n = d / site."""
    n = d / SITE
    return params.tau_ho * math.sqrt(2 * n / math.pi)


def classical_jump(d: float, tau: float, params: LatticeParams) -> float:
    t_cb = tau_cb(d, params)
    ratio = (t_cb / tau) ** 2
    if ratio > 1 + 1e-12:
        raise InfeasibleTrajectory(
            f"tau={tau:.6g} is shorter than the classical brachistochrone time tau_CB={t_cb:.6g}"
        )
    # lambda/(4 pi) = 1/2 in recoil units
    return 0.5 * math.asin(min(ratio, 1.0))


def classical_ansatz(d: float, tau: float, params: LatticeParams) -> Trajectory:
    """Accelerate-decelerate trap motion with sudden offsets +dx, -2dx, +dx."""
    return Trajectory("classical_ansatz", d, tau, delta_x=classical_jump(d, tau, params))


def fourier(coefficients, d: float, tau: float) -> Trajectory:
    return Trajectory("fourier", d, tau, coefficients=np.asarray(coefficients, dtype=float))


def sampled(times, positions, d: Optional[float] = None) -> Trajectory:
    times = np.asarray(times, dtype=float)
    positions = np.asarray(positions, dtype=float)
    d = float(positions[-1] - positions[0]) if d is None else d
    return Trajectory("sampled", d, float(times[-1] - times[0]), times=times, positions=positions)


def frequencies(j_max: int, tau: float) -> np.ndarray:
    return np.pi * np.arange(1, j_max + 1) / tau


def fourier_eval(coeffs, d, tau, t):
    """d (1 - cos(nu_1 t))/2 + sum_j b_j sin(nu_j t), nu_j = pi j / tau.

    ``coeffs`` may be 2-D (batch, j_max); the result then has shape
    (batch,) + t.shape.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    t = np.clip(np.asarray(t, dtype=float), 0.0, tau)
    base = 0.5 * d * (1 - np.cos(np.pi * t / tau))
    if coeffs.shape[-1] == 0:
        return np.broadcast_to(base, coeffs.shape[:-1] + base.shape).copy()
    nu = frequencies(coeffs.shape[-1], tau)
    basis = np.sin(np.multiply.outer(t, nu))
    return base + np.tensordot(coeffs, basis, axes=([-1], [-1]))


def fourier_velocity(coeffs, d, tau, t):
    coeffs = np.asarray(coeffs, dtype=float)
    t = np.clip(np.asarray(t, dtype=float), 0.0, tau)
    nu1 = np.pi / tau
    base = 0.5 * d * nu1 * np.sin(nu1 * t)
    if coeffs.shape[-1] == 0:
        return np.broadcast_to(base, coeffs.shape[:-1] + base.shape).copy()
    nu = frequencies(coeffs.shape[-1], tau)
    basis = np.cos(np.multiply.outer(t, nu)) * nu
    return base + np.tensordot(coeffs, basis, axes=([-1], [-1]))


@dataclass
class Projection:
    coefficients: np.ndarray
    rms_error: float
    max_error: float


def project_to_fourier(traj: Trajectory, j_max: int, even_only: bool = False,
                       n_samples: int = PROJECTION_SAMPLES) -> Projection:
    """Least-squares sine coefficients of traj(t) - d(1 - cos(nu_1 t))/2 on [0, tau]."""
    tau, d = traj.tau, traj.d
    t = np.linspace(0.0, tau, n_samples)
    target = traj.position(t) - 0.5 * d * (1 - np.cos(np.pi * t / tau))
    js = np.arange(1, j_max + 1)
    use = js % 2 == 0 if even_only else np.ones(j_max, bool)
    basis = np.sin(np.outer(t, np.pi * js[use] / tau))
    sol, *_ = np.linalg.lstsq(basis, target, rcond=None)
    coeffs = np.zeros(j_max)
    coeffs[use] = sol
    resid = basis @ sol - target
    return Projection(coeffs, float(np.sqrt(np.mean(resid**2))), float(np.max(np.abs(resid))))


def envelope_duration(protocol: str, fidelity: float, l_qgt: float, params: LatticeParams) -> float:
    """Worst-case duration reaching ``fidelity`` in the harmonic approximation."""
    if not 0 < fidelity < 1:
        raise ValueError("target fidelity must lie in (0, 1)")
    log_f = -math.log(fidelity)
    t_ho = params.tau_ho
    if protocol == "linear":
        return t_ho * l_qgt / (math.pi * math.sqrt(log_f))
    if protocol == "parabolic":
        return t_ho * 2 / math.pi * math.sqrt(l_qgt) / log_f**0.25
    if protocol in ("adiabatic", "adiabatic_sine"):
        return t_ho * math.sqrt(2 / 3 + (l_qgt**2 / (math.pi**2 * log_f)) ** (1 / 3))
    raise ValueError(f"no envelope for protocol {protocol!r}")


def envelope_infidelity(protocol: str, tau, l_qgt: float, params: LatticeParams):
    """Inverse of :func:`envelope_duration` for the bang-bang ramps: 1 - F_worst(tau)."""
    r = params.tau_ho / np.asarray(tau, dtype=float)
    if protocol == "linear":
        return 1 - np.exp(-((l_qgt * r / np.pi) ** 2))
    if protocol == "parabolic":
        return 1 - np.exp(-((2 / np.pi) ** 4) * l_qgt**2 * r**4)
    raise ValueError(f"no closed-form infidelity for protocol {protocol!r}")


@dataclass(frozen=True)
class FeasibilityLimits:
    max_slew: float = 0.84  # rad/us
    bandwidth_hz: float = 800e3

    def __post_init__(self):
        if self.max_slew <= 0 or self.bandwidth_hz <= 0:
            raise ValueError("feasibility limits must be positive")


@dataclass
class FeasibilityReport:
    max_velocity: float
    slew_rad_per_us: float
    slew_sites_per_us: float
    max_frequency_hz: float
    slew_ok: bool
    bandwidth_ok: bool

    @property
    def ok(self) -> bool:
        return self.slew_ok and self.bandwidth_ok


def velocity_limit(limits: FeasibilityLimits, params: LatticeParams) -> float:
    """Slew limit as a trap speed in recoil units (phase = 2 x)."""
    return 0.5 * limits.max_slew * params.to_us(1.0)


def max_speed(traj: Trajectory, n: int = 8192) -> float:
    if traj.kind == "classical_ansatz" and traj.delta_x > 0:
        return math.inf
    if traj.kind == "sampled":
        return float(np.max(np.abs(np.diff(traj.positions) / np.diff(traj.times))))
    t = np.linspace(0.0, traj.tau, n)
    return float(np.max(np.abs(traj.velocity(t))))


def max_frequency(traj: Trajectory) -> float:
    """Highest angular frequency present, recoil units; inf for kinked ramps."""
    if traj.kind == "fourier":
        nz = np.flatnonzero(traj.coefficients)
        j = nz[-1] + 1 if len(nz) else (1 if traj.d != 0 else 0)
        return math.pi * j / traj.tau
    if traj.kind == "sampled":
        return math.pi / float(np.min(np.diff(traj.times)))
    return math.inf if traj.d != 0 else 0.0


def feasibility_check(traj: Trajectory, limits: FeasibilityLimits, params: LatticeParams) -> FeasibilityReport:
    v = max_speed(traj)
    us = params.to_us(1.0)
    slew = 2 * v / us
    nu = max_frequency(traj)
    f_hz = nu / (2 * math.pi) / params.time_unit_s if math.isfinite(nu) else math.inf
    return FeasibilityReport(
        max_velocity=v,
        slew_rad_per_us=slew,
        slew_sites_per_us=slew / (2 * math.pi),
        max_frequency_hz=f_hz,
        slew_ok=bool(slew <= limits.max_slew * (1 + 1e-9)),
        bandwidth_ok=bool(f_hz <= limits.bandwidth_hz),
    )


def default_j_max(tau: float, params: LatticeParams, limits: FeasibilityLimits = FeasibilityLimits(),
                  cap: int = J_MAX_CAP) -> int:
    """Largest j with nu_j within the control bandwidth, capped for desk-scale runs."""
    nu_max = 2 * math.pi * limits.bandwidth_hz * params.time_unit_s
    j = min(int(math.floor(nu_max * tau / math.pi + 1e-9)), cap)
    if math.pi * j / tau < params.u0:
        warnings.warn(
            f"highest control frequency nu_{j}={math.pi * j / tau:.4g} is below U0/hbar={params.u0:.4g}",
            stacklevel=2,
        )
    return max(j, 2)
