import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conveyor.dynamics import Grid, default_dt, ground_state, split_step, well_potential
from conveyor.geometry import (
    ResolutionError,
    bound_report,
    coherent_model,
    delta_e_upper,
    energy_spread,
    f_factor,
    geodesic_length,
    kinetic_potential_spread,
    l_qb_estimate,
    l_qgt,
    l_qgt_numeric,
    mandelstam_tamm_time,
    path_length,
    qb_position,
    qb_velocity,
    record_transport,
    refinement_change,
)
from conveyor.lattice import SITE, LatticeParams
from conveyor.protocols import classical_ansatz, linear, parabolic, tau_cb

P150 = LatticeParams.cesium(150)
GRID = Grid()


def static_run(psi, u, periods=1.0, every=4):
    times, rows = [], []
    split_step(psi.amps, GRID, lambda t: u, 0.0, periods * P150.tau_ho, default_dt(P150),
               observer=lambda k, t, a: (times.append(t), rows.append(a.copy())), every=every)
    return np.array(times), np.stack(rows)


class TestPathLength:
    def test_eigenstate_has_no_length(self):
        grid = Grid(4, 32)
        u = well_potential(grid, P150.u0, 0.0)
        # dense spectral Hamiltonian on the grid
        f = np.fft.fft(np.eye(grid.n), axis=0)
        h = np.fft.ifft(grid.p[:, None] ** 2 * f, axis=0) + np.diag(u)
        e, v = np.linalg.eigh(0.5 * (h + h.conj().T))
        psi = v[:, 0] / math.sqrt(grid.dx)
        t = np.linspace(0.0, P150.tau_ho, 101)
        rows = psi[None, :] * np.exp(-1j * e[0] * t)[:, None]
        assert path_length(rows, grid) < 1e-8
        assert energy_spread(rows, np.broadcast_to(u, rows.shape), t, grid) < 1e-10

    def test_relaxed_ground_state_wobble_is_splitting_error(self):
        psi = ground_state(GRID, P150)
        u = well_potential(GRID, P150.u0, 0.0)

        def length(dt):
            rows = []
            split_step(psi.amps, GRID, lambda t: u, 0.0, P150.tau_ho, dt,
                       observer=lambda k, t, a: rows.append(a.copy()), every=int(round(4 * default_dt(P150) / dt)))
            return path_length(np.stack(rows), GRID)

        coarse, fine = length(default_dt(P150)), length(default_dt(P150) / 2)
        assert coarse < 1e-3
        assert 3.5 < coarse / fine < 4.5

    def test_coherent_state_circle(self):
        shift = 0.3
        psi = ground_state(GRID, P150, well="harmonic").shifted(shift)
        u = well_potential(GRID, P150.u0, 0.0, "harmonic")
        t, rows = static_run(psi, u)
        alpha = shift / (2 * P150.delta_x)
        assert path_length(rows, GRID) == pytest.approx(2 * math.pi * alpha, rel=0.005)
        spread = energy_spread(rows, np.broadcast_to(u, rows.shape), t, GRID)
        assert spread == pytest.approx(P150.omega_ho * alpha, rel=0.01)
        # Anandan-Aharonov identity on a static run
        assert path_length(rows, GRID) == pytest.approx(spread * t[-1], rel=0.01)

    def test_coarse_sampling_rejected(self):
        psi = ground_state(GRID, P150, well="harmonic").shifted(0.5)
        u = well_potential(GRID, P150.u0, 0.0, "harmonic")
        _, rows = static_run(psi, u, every=128)
        with pytest.raises(ResolutionError):
            path_length(rows, GRID)

    def test_needs_two_states(self):
        with pytest.raises(ValueError):
            path_length([ground_state(GRID, P150)])


class TestFFactor:
    def test_values(self):
        assert f_factor(0.0) == 1.0
        assert f_factor(1.0) == pytest.approx(math.sqrt(2) + math.log(1 + math.sqrt(2)), rel=1e-12)
        assert f_factor(1.0) == pytest.approx(2.2956, abs=1e-4)
        assert f_factor(1 / math.pi) == pytest.approx(1.2381, abs=1e-4)

    def test_monotone(self):
        xi = np.linspace(0.0, 5.0, 100)
        assert np.all(np.diff(f_factor(xi)) > 0)
        assert np.all(f_factor(xi) >= 1.0)

    def test_small_xi_continuous(self):
        assert f_factor(1e-12) == pytest.approx(1.0, abs=1e-9)

    def test_negative(self):
        with pytest.raises(ValueError):
            f_factor(-0.1)


class TestLengths:
    def test_qgt_one_site(self):
        assert l_qgt(SITE, P150) == pytest.approx(SITE / (2 * P150.delta_x), rel=1e-12)
        assert l_qgt(SITE, P150) == pytest.approx(7.774, abs=1e-3)

    def test_qgt_fifteen_widths(self):
        assert l_qgt(15 * P150.delta_x, P150) == pytest.approx(7.5, rel=1e-12)

    @pytest.mark.parametrize("u0", [70.0, 150.0, 300.0])
    def test_numeric_qgt(self, u0):
        p = LatticeParams.cesium(u0)
        numeric = l_qgt_numeric(SITE, p)
        # translations are generated by p, so the integral is d times the numeric momentum width
        assert numeric == pytest.approx(SITE * ground_state(GRID, p).width_p(), rel=1e-3)
        assert numeric == pytest.approx(l_qgt(SITE, p), rel=0.05)

    def test_qb_estimate_limit_and_value(self):
        assert l_qb_estimate(SITE, 1e6 * P150.tau_ho, P150) == pytest.approx(l_qgt(SITE, P150), rel=1e-9)
        assert l_qb_estimate(SITE, P150.tau_ho, P150) == pytest.approx(l_qgt(SITE, P150) * 1.2381, rel=1e-4)

    @given(ratio=st.floats(0.05, 50), n=st.integers(1, 10))
    def test_qb_estimate_above_qgt(self, ratio, n):
        tau = ratio * P150.tau_ho
        assert l_qb_estimate(n * SITE, tau, P150) >= l_qgt(n * SITE, P150)
        assert delta_e_upper(n * SITE, tau, P150) >= l_qgt(n * SITE, P150) / tau

    def test_mt_time(self):
        a = ground_state(GRID, P150)
        assert mandelstam_tamm_time(a, a, 3.0) == 0.0
        far = a.shifted(4 * SITE)
        assert geodesic_length(a, far) == pytest.approx(math.pi / 2, abs=1e-9)
        assert mandelstam_tamm_time(a, far, 3.0) == pytest.approx(math.pi / 6, rel=1e-9)
        assert mandelstam_tamm_time(a, far, 0.0) == math.inf
        with pytest.raises(ValueError):
            mandelstam_tamm_time(a, far, -1.0)

    def test_mt_time_falls_with_distance(self):
        a = ground_state(GRID, P150)
        times = []
        for n in (1, 2, 4, 8):
            d = n * SITE
            de = l_qgt(d, P150) / tau_cb(d, P150)  # kinetic-dominated spread with tau_QB ~ sqrt(d)
            times.append(mandelstam_tamm_time(a, a.shifted(d), de))
        assert all(b < c for c, b in zip(times, times[1:]))


class TestCoherentModel:
    @pytest.mark.parametrize("ratio", [0.5, 1.0, 2.0])
    def test_quadrature_matches_closed_form(self, ratio):
        m = coherent_model(SITE, ratio * P150.tau_ho, P150)
        assert m.ell == pytest.approx(m.ell_closed, rel=1e-4)

    def test_mean_path(self):
        d, tau = SITE, 1.3
        assert qb_position(0.0, d, tau) == 0.0
        assert qb_position(tau, d, tau) == pytest.approx(d)
        eps = 1e-9
        assert qb_velocity(tau / 2 - eps, d, tau) == pytest.approx(2 * d / tau, rel=1e-6)
        assert qb_velocity(tau / 2 + eps, d, tau) == pytest.approx(2 * d / tau, rel=1e-6)


class TestRunReports:
    @pytest.mark.parametrize("make", [
        lambda: linear(SITE, P150.tau_ho),
        lambda: parabolic(SITE, 2 * P150.tau_ho),
        lambda: classical_ansatz(SITE, 1.2 * P150.tau_ho, P150),
    ])
    def test_identity_and_bounds(self, make):
        tr = make()
        rep = bound_report(record_transport(tr, P150))
        assert rep.aa_residual < 0.01
        assert rep.ell >= rep.ell_geo
        assert rep.bound_flags["ell_above_qgt"]
        assert rep.ell_geo == pytest.approx(math.pi / 2, abs=1e-3)
        assert rep.bound_flags["ell_over_geo"] > 4

    def test_refinement(self):
        d_ell, d_e = refinement_change(classical_ansatz(SITE, 1.2 * P150.tau_ho, P150), P150)
        assert d_ell < 1e-3 and d_e < 1e-3

    def test_optimized_run(self, optimized):
        res = optimized(150.0, 1.5)
        rep = bound_report(record_transport(res.trajectory, P150))
        assert rep.aa_residual < 0.01
        assert rep.bound_flags["delta_e_below_upper"]
        assert rep.bound_flags["tau_above_mt"]
        assert rep.ell == pytest.approx(rep.ell_qb_est, rel=0.1)

    @pytest.mark.parametrize("make", [lambda: parabolic(SITE, P150.tau_ho), lambda: linear(SITE, P150.tau_ho)])
    def test_fast_runs_are_kinetic(self, make):
        tr = make()
        dk, du = kinetic_potential_spread(record_transport(tr, P150))
        assert dk / du > (tr.d / SITE) * P150.tau_ho / tr.tau

    def test_report_serializes(self):
        rep = bound_report(record_transport(parabolic(SITE, 2 * P150.tau_ho), P150))
        d = rep.to_dict()
        assert set(d) >= {"ell", "delta_e", "ell_geo", "ell_qgt", "ell_qb_est", "delta_e_upper", "tau_mt",
                          "aa_residual", "bound_flags"}
        assert all(v >= 0 for k, v in d.items() if k != "bound_flags")
