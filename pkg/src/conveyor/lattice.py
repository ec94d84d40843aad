"""Conveyor-belt lattice potentials and harmonic scales.

Everything is in recoil units: hbar = E_rec = k = 1, so the lattice wavelength
is 2*pi, one site is pi and the Hamiltonian reads ``-d^2/dx^2 + U(x, t)``
(mass 1/2). Time is measured in hbar/E_rec.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

SITE = math.pi
WAVELENGTH = 2 * math.pi

# Share of each circular component seen by the spin-down atom (L dominant).
WEIGHT_L = 7 / 8
WEIGHT_R = 1 / 8

CESIUM_LAMBDA_NM = 865.9
CESIUM_E_REC_HZ = 2000.0


class InfeasibleCompensation(ValueError):
    """No L-phase keeps the spin-down lattice at the requested position."""

    def __init__(self, message, extremum):
        super().__init__(message)
        self.extremum = extremum


@dataclass(frozen=True)
class LatticeParams:
    u0: float
    e_rec_hz: Optional[float] = None
    lambda_nm: Optional[float] = None

    def __post_init__(self):
        if not self.u0 > 0:
            raise ValueError(f"trap depth must be positive, got u0={self.u0}")

    @classmethod
    def cesium(cls, u0: float) -> "LatticeParams":
        return cls(u0, e_rec_hz=CESIUM_E_REC_HZ, lambda_nm=CESIUM_LAMBDA_NM)

    @property
    def omega_ho(self) -> float:
        return 2.0 * math.sqrt(self.u0)

    @property
    def tau_ho(self) -> float:
        return math.pi / math.sqrt(self.u0)

    @property
    def delta_x(self) -> float:
        """Harmonic ground-state rms width, sqrt(hbar / (2 m omega))."""
        return 1.0 / math.sqrt(self.omega_ho)

    @property
    def delta_p(self) -> float:
        return 0.5 / self.delta_x

    def with_depth(self, u0: float) -> "LatticeParams":
        return LatticeParams(u0, self.e_rec_hz, self.lambda_nm)

    # SI helpers
    @property
    def time_unit_s(self) -> float:
        if self.e_rec_hz is None:
            raise ValueError("e_rec_hz is required for SI conversion")
        return 1.0 / (2 * math.pi * self.e_rec_hz)

    @property
    def length_unit_m(self) -> float:
        if self.lambda_nm is None:
            raise ValueError("lambda_nm is required for SI conversion")
        return self.lambda_nm * 1e-9 / (2 * math.pi)

    def to_us(self, t: float) -> float:
        return t * self.time_unit_s * 1e6

    def from_us(self, t_us: float) -> float:
        return t_us * 1e-6 / self.time_unit_s

    def to_nm(self, x: float) -> float:
        return x * self.length_unit_m * 1e9


def harmonic_period(params: LatticeParams, si: bool = False) -> float:
    """Small-oscillation period pi/sqrt(u0); seconds when ``si`` is set."""
    if si:
        return params.tau_ho * params.time_unit_s
    return params.tau_ho


def potential_up(x, x_trap, u0):
    """Spin-up conveyor belt, -u0 cos^2(x - x_trap); wells sit at x_trap + m*pi."""
    return -u0 * np.cos(np.subtract(x, x_trap)) ** 2


@dataclass(frozen=True)
class SpinDownField:
    i_l: float
    i_r: float
    phi_l: float = 0.0
    phi_r: float = 0.0
    phi_0: float = 0.0

    def __post_init__(self):
        if self.i_l < 0 or self.i_r < 0:
            raise ValueError("intensities must be non-negative")
        if self.i_l == 0 and self.i_r == 0:
            raise ValueError("at least one polarization component must be lit")

    def with_phases(self, phi_l=None, phi_r=None) -> "SpinDownField":
        return SpinDownField(
            self.i_l,
            self.i_r,
            self.phi_l if phi_l is None else phi_l,
            self.phi_r if phi_r is None else phi_r,
            self.phi_0,
        )


def _down_phasor(i_l, i_r, phi_l, phi_r, phi_0=0.0):
    return WEIGHT_L * i_l * np.exp(1j * (np.asarray(phi_l) - phi_0)) + WEIGHT_R * i_r * np.exp(
        1j * (np.asarray(phi_r) - phi_0)
    )


def spin_down_lattice(field: SpinDownField):
    """Return (depth, offset, position) of the spin-down standing wave.

    The two circular components are standing waves of the same period, so
    their weighted sum is again a cos^2 lattice whose contrast and position
    follow from the complex phasor sum.
    """
    z = _down_phasor(field.i_l, field.i_r, field.phi_l, field.phi_r, field.phi_0)
    depth = np.abs(z)
    offset = 0.5 * (WEIGHT_L * field.i_l + WEIGHT_R * field.i_r) - 0.5 * depth
    position = 0.5 * np.angle(z)
    return depth, offset, position


def potential_down(x, field: SpinDownField):
    depth, offset, position = spin_down_lattice(field)
    return -offset - depth * np.cos(np.subtract(x, position)) ** 2


def standing_wave_position(phi, phi_0=0.0):
    """Position of a standing wave from its optical phase, lambda/2 * (phi - phi_0)/(2 pi)."""
    return 0.5 * (np.asarray(phi) - phi_0)


def phase_for_position(x, phi_0=0.0):
    return 2.0 * np.asarray(x) + phi_0


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def compensation_phase(phi_r: float, field: SpinDownField, x_down_target: float = 0.0, phi_l_guess=None) -> float:
    """L-phase that holds the spin-down lattice at ``x_down_target``.

    Solved by bracketed root finding on the phasor angle, starting from the
    branch nearest ``phi_l_guess`` (the previous value along a ramp).
    """
    a = WEIGHT_L * field.i_l
    b = WEIGHT_R * field.i_r
    target = 2.0 * x_down_target + field.phi_0
    rel = _wrap(phi_r - target)
    # The L phasor must cancel the transverse part of the R phasor.
    if a == 0 or b * abs(math.sin(rel)) > a:
        best = math.asin(min(1.0, a / b)) if b > 0 else math.pi / 2
        raise InfeasibleCompensation(
            f"R component too strong: |x_down - target| cannot be nulled at phi_r={phi_r:.6g}",
            extremum=best,
        )

    def residual(u):
        # u is the L phase measured from the target phase
        z = a * np.exp(1j * u) + b * np.exp(1j * rel)
        return math.atan2(z.imag, z.real)

    # The useful root lies within +-pi/2 of the target phase (positive contrast).
    lo, hi = -math.pi / 2 + 1e-12, math.pi / 2 - 1e-12
    root = brentq(residual, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    if abs(residual(root)) > 1e-9:
        # sign change came from the +-pi branch cut, not a true zero
        raise InfeasibleCompensation(
            f"no positive-contrast solution at phi_r={phi_r:.6g}", extremum=abs(residual(root))
        )
    phi_l = root + target
    if phi_l_guess is not None:
        phi_l += 2 * math.pi * round((phi_l_guess - phi_l) / (2 * math.pi))
    return phi_l


def compensation_ramp(phi_r, field: SpinDownField, x_down_target: float = 0.0):
    """Branch-tracked compensation along a sequence of R phases."""
    out = np.empty(len(phi_r))
    prev = None
    for i, pr in enumerate(phi_r):
        prev = compensation_phase(float(pr), field, x_down_target, prev)
        out[i] = prev
    return out


def band_structure(params: LatticeParams, n_bands: int = 16, pts: int = 128):
    """Band energies at zero quasimomentum and band widths of the static lattice.

    Plane-wave Hamiltonian on one lattice period; band extrema of a 1-d cos^2
    lattice sit at the zone centre and the zone edge.
    """
    dx = SITE / pts
    x = np.arange(pts) * dx - SITE / 2
    u = -params.u0 * np.cos(x) ** 2
    edges = []
    for q in (0.0, 1.0):
        k = np.fft.fftfreq(pts, d=dx) * 2 * np.pi + q
        f = np.fft.fft(np.eye(pts), axis=0)
        kinetic = np.fft.ifft(k[:, None] ** 2 * f, axis=0)
        h = kinetic + np.diag(u)
        edges.append(np.linalg.eigvalsh(0.5 * (h + h.conj().T))[:n_bands])
    centre, edge = edges
    return centre, np.abs(edge - centre)


def bound_level_count(params: LatticeParams) -> int:
    """Bands lying entirely below the top of the barrier."""
    centre, width = band_structure(params)
    return int(np.sum(np.maximum(centre, centre + width) < 0.0))


def controlled_level_count(params: LatticeParams, tau: Optional[float] = None, max_phase: float = 0.25) -> int:
    """Levels whose tunneling stays negligible over ``tau`` (default one harmonic period).

    A band of width W lets a site state leak at rate ~W; levels with
    W * tau < ``max_phase`` count as controlled.
    """
    tau = params.tau_ho if tau is None else tau
    _, width = band_structure(params)
    return int(np.argmax(width * tau >= max_phase)) if np.any(width * tau >= max_phase) else len(width)
