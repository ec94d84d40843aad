"""Simulated actuator chain: band-limited plant, regularized inversion, iterative pre-distortion.

Signals here are in microseconds and in units of the lattice wavelength
(x / lambda), the convention of the drive electronics. One lattice site is
half a wavelength.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import transport
from .lattice import CESIUM_LAMBDA_NM, LatticeParams
from .protocols import sampled

SITE_LAMBDA = 0.5
DEFAULT_SLEW = 0.84  # rad/us of the standing-wave phase
GROWTH_TOL = 0.01  # increases below this fraction count as a plateau, not divergence


class InstabilityError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


def slew_in_lambda(slew_rad_per_us: float) -> float:
    """Phase rate to position rate: the lattice moves lambda/2 per 2 pi of phase."""
    return slew_rad_per_us / (4 * math.pi)


@dataclass(frozen=True)
class ImpulseResponse:
    samples: np.ndarray
    dt_us: float
    delay_us: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) == 0 or not np.all(np.isfinite(s)):
            raise ValueError("kernel samples must be a finite 1-d array")
        if self.dt_us <= 0:
            raise ValueError("dt_us must be positive")
        gain = s.sum() * self.dt_us
        if gain == 0:
            raise ValueError("kernel has zero DC gain")
        object.__setattr__(self, "samples", s / gain)

    @classmethod
    def identity(cls, dt_us: float = 0.05) -> "ImpulseResponse":
        return cls(np.array([1.0 / dt_us]), dt_us)

    @classmethod
    def low_pass(cls, delay_us: float = 0.4, cutoff_hz: float = 800e3, dt_us: float = 0.05,
                 tail: float = 14.0) -> "ImpulseResponse":
        """Pure delay followed by a first-order low-pass, cut after ``tail`` time constants."""
        tc = 1e6 / (2 * math.pi * cutoff_hz)
        t = np.arange(0.0, delay_us + tail * tc + dt_us / 2, dt_us)
        # integrate the exponential over each sample bin so coarse sampling keeps the shape
        a = np.clip(t - delay_us, 0.0, None)
        b = np.clip(t + dt_us - delay_us, 0.0, None)
        h = (np.exp(-a / tc) - np.exp(-b / tc)) / dt_us
        return cls(h, dt_us, delay_us)

    @classmethod
    def from_csv(cls, path) -> "ImpulseResponse":
        t, v = load_signal_csv(path)
        dt = np.diff(t)
        if len(t) > 1 and not np.allclose(dt, dt[0], rtol=1e-6):
            raise ValueError("kernel file must be uniformly sampled")
        return cls(v, float(dt[0]) if len(t) > 1 else 1.0)

    def to_csv(self, path):
        t = np.arange(len(self.samples)) * self.dt_us
        save_signal_csv(path, t, self.samples, header="time_us,value")

    def transfer(self, n: int) -> np.ndarray:
        """Discrete transfer function on an n-point periodic grid (unit DC gain)."""
        if len(self.samples) > n:
            raise ValueError("signal shorter than the kernel")
        return np.fft.rfft(self.samples * self.dt_us, n)


@dataclass(frozen=True)
class Plant:
    kernel: ImpulseResponse = field(default_factory=ImpulseResponse.low_pass)
    slew_limit: Optional[float] = DEFAULT_SLEW  # rad/us; None disables saturation
    noise_rms_nm: float = 0.0
    lambda_nm: float = CESIUM_LAMBDA_NM

    def __post_init__(self):
        if self.slew_limit is not None and self.slew_limit <= 0:
            raise ValueError("slew_limit must be positive")
        if self.noise_rms_nm < 0:
            raise ValueError("noise_rms_nm must be non-negative")

    @classmethod
    def linear(cls, kernel: Optional[ImpulseResponse] = None) -> "Plant":
        return cls(kernel or ImpulseResponse.low_pass(), slew_limit=None)


def _check_rate(times_us, dt_us, resample: bool):
    times_us = np.asarray(times_us, dtype=float)
    steps = np.diff(times_us)
    if len(steps) and np.allclose(steps, dt_us, rtol=1e-6, atol=1e-12):
        return times_us, None
    if not resample:
        raise ValueError(f"signal spacing does not match the kernel sampling {dt_us} us")
    grid = np.arange(times_us[0], times_us[-1] + dt_us / 2, dt_us)
    return grid, times_us


def apply_plant(times_us, drive, plant: Plant, seed: Optional[int] = None, resample: bool = False):
    """Actual trap position for a commanded ``drive``.

    Returns (times_us, actual). The drive is held at its first value before
    the record starts, so a quiet lead-in produces a quiet response.
    """
    times_us, orig = _check_rate(times_us, plant.kernel.dt_us, resample)
    drive = np.asarray(drive, dtype=float)
    if orig is not None:
        drive = np.interp(times_us, orig, drive)
    h = plant.kernel.samples * plant.kernel.dt_us
    lead = np.full(len(h) - 1, drive[0])
    out = np.convolve(np.concatenate([lead, drive]), h, mode="valid")
    if plant.slew_limit is not None:
        out = _saturate(out, slew_in_lambda(plant.slew_limit) * plant.kernel.dt_us)
    if plant.noise_rms_nm > 0:
        rng = np.random.default_rng(seed)
        out = out + rng.normal(scale=plant.noise_rms_nm / plant.lambda_nm, size=len(out))
    return times_us, out


def _saturate(x, max_step):
    y = np.empty_like(x)
    y[0] = x[0]
    for i in range(1, len(x)):
        y[i] = y[i - 1] + min(max(x[i] - y[i - 1], -max_step), max_step)
    return y


def deconvolve(target, kernel: ImpulseResponse, reg: float = 1e-3):
    """Drive that the linear part of the plant maps onto ``target``.

    Tikhonov-regularized inverse filter H* / (|H|^2 + reg max|H|^2). The
    target is mirrored first so the periodic transform sees no jump at the
    record ends.
    """
    target = np.asarray(target, dtype=float)
    n = len(target)
    ext = np.concatenate([target, target[::-1]])
    H = kernel.transfer(2 * n)
    peak = np.max(np.abs(H)) ** 2
    inverse = np.conj(H) / (np.abs(H) ** 2 + reg * peak)
    return np.fft.irfft(np.fft.rfft(ext) * inverse, 2 * n)[:n]


@dataclass
class CompensationResult:
    drive: np.ndarray
    actual: np.ndarray
    history: list
    converged: bool


def iterate_compensation(times_us, target, plant: Plant, gain: float = 0.4, max_iter: int = 10,
                         reg: float = 1e-3, threshold: float = 1e-3 * SITE_LAMBDA,
                         seed: Optional[int] = None) -> CompensationResult:
    """Iterative pre-distortion: shift the pre-image by ``gain`` times the measured error and invert again."""
    if gain < 0:
        raise ValueError("gain must be non-negative")
    target = np.asarray(target, dtype=float)
    pre = target.copy()
    drive = deconvolve(pre, plant.kernel, reg)
    history = []
    rising = 0
    for _ in range(max_iter):
        _, actual = apply_plant(times_us, drive, plant, seed)
        residual = actual - target
        err = float(np.max(np.abs(residual)))
        if history and err > history[-1] * (1 + GROWTH_TOL):
            rising += 1
            if rising >= 3:
                history.append(err)
                raise InstabilityError("pre-distortion diverges", history)
        else:
            rising = 0
        history.append(err)
        if err < threshold:
            return CompensationResult(drive, actual, history, True)
        pre = pre - gain * residual
        drive = deconvolve(pre, plant.kernel, reg)
    _, actual = apply_plant(times_us, drive, plant, seed)
    return CompensationResult(drive, actual, history, False)


# --- bridges to the simulator -------------------------------------------------

def sample_trajectory(traj, params: LatticeParams, dt_us: float = 0.05, pad_us: float = 5.0):
    """Trajectory on a uniform microsecond grid with quiet holds before and after."""
    tau_us = params.to_us(traj.tau)
    n = int(math.ceil((tau_us + 2 * pad_us) / dt_us)) + 1
    t_us = -pad_us + dt_us * np.arange(n)
    x = traj.position(traj.span[0] + params.from_us(t_us))
    return t_us, x / (2 * math.pi)


def as_trajectory(times_us, x_lambda, params: LatticeParams, d: Optional[float] = None):
    t = params.from_us(np.asarray(times_us, dtype=float))
    return sampled(t, np.asarray(x_lambda) * 2 * math.pi, d=d)


@dataclass
class EndToEnd:
    ideal_fidelity: float
    plant_fidelity: float
    history: list

    @property
    def penalty(self) -> float:
        return self.ideal_fidelity - self.plant_fidelity


def end_to_end_fidelity(traj, params: LatticeParams, plant: Plant = Plant(), gain: float = 0.4,
                        max_iter: int = 10, reg: float = 1e-3, pad_us: float = 5.0, grid=None,
                        dt=None) -> EndToEnd:
    """Fidelity of ``traj`` as commanded ideally versus after the pre-distorted plant."""
    t_us, target = sample_trajectory(traj, params, plant.kernel.dt_us, pad_us)
    comp = iterate_compensation(t_us, target, plant, gain, max_iter, reg)
    actual = as_trajectory(t_us, comp.actual, params)
    ideal = transport(traj, params, grid, dt).fidelity
    real = transport(actual, params, grid, dt)
    return EndToEnd(ideal, real.fidelity, comp.history)


def save_signal_csv(path, times_us, values, header: str = "time_us,x_over_lambda"):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([times_us, values]), delimiter=",", header=header, comments="",
               fmt="%.12g")


def load_signal_csv(path):
    """Two-column CSV, with or without a header line."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.split(",")]
        skip = 0
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return data[:, 0], data[:, 1]
