import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conveyor.control_chain import (
    SITE_LAMBDA,
    ImpulseResponse,
    InstabilityError,
    Plant,
    apply_plant,
    as_trajectory,
    deconvolve,
    end_to_end_fidelity,
    iterate_compensation,
    load_signal_csv,
    sample_trajectory,
    save_signal_csv,
    slew_in_lambda,
)
from conveyor.lattice import SITE, LatticeParams
from conveyor.protocols import adiabatic_sine

P150 = LatticeParams.cesium(150)
DT = 0.05


def gaussian_kernel(delay=0.5, width=0.15):
    t = np.arange(0.0, delay + 6 * width, DT)
    return ImpulseResponse(np.exp(-0.5 * ((t - delay) / width) ** 2), DT, delay)


def smooth_ramp(duration_us=20.0, pad_us=5.0):
    t = np.arange(-pad_us, duration_us + pad_us + DT / 2, DT)
    s = np.clip(t / duration_us, 0.0, 1.0)
    return t, SITE_LAMBDA * (s - np.sin(2 * np.pi * s) / (2 * np.pi))


@pytest.fixture(scope="module")
def optimal_target(optimized):
    return sample_trajectory(optimized(150.0, 1.5).trajectory, P150)


class TestKernel:
    def test_unit_dc_gain(self):
        k = ImpulseResponse.low_pass()
        assert k.samples.sum() * k.dt_us == pytest.approx(1.0, rel=1e-12)
        assert gaussian_kernel().samples.sum() * DT == pytest.approx(1.0, rel=1e-12)

    def test_low_pass_shape(self):
        k = ImpulseResponse.low_pass(delay_us=0.4)
        t = np.arange(len(k.samples)) * k.dt_us
        assert np.all(k.samples[t < 0.4 - 1e-9] == 0.0)
        assert np.argmax(k.samples) == round(0.4 / k.dt_us)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ImpulseResponse(np.zeros(4), DT)
        with pytest.raises(ValueError):
            Plant(slew_limit=0.0)

    def test_csv_round_trip(self, tmp_path):
        k = ImpulseResponse.low_pass()
        k.to_csv(tmp_path / "k.csv")
        back = ImpulseResponse.from_csv(tmp_path / "k.csv")
        assert back.dt_us == pytest.approx(k.dt_us)
        assert np.allclose(back.samples, k.samples, rtol=1e-10)


class TestPlant:
    def test_identity_plant(self):
        t, x = smooth_ramp()
        _, out = apply_plant(t, x, Plant(ImpulseResponse.identity(DT), slew_limit=None))
        assert np.array_equal(out, x)

    def test_step_through_gaussian(self):
        t = np.arange(0.0, 10.0, DT)
        step = np.where(t >= 2.0, 0.3, 0.0)
        _, out = apply_plant(t, step, Plant(gaussian_kernel(), slew_limit=None))
        slope = np.diff(out)
        assert np.sum(slope) == pytest.approx(0.3, abs=1e-12)
        assert np.all(slope >= -1e-15)
        assert np.max(slope) < 0.3 / 5  # spread over several samples
        # the edge moves by the kernel delay
        assert t[np.argmax(slope)] == pytest.approx(2.5, abs=DT)

    def test_saturation(self):
        t = np.arange(0.0, 10.0, DT)
        step = np.where(t >= 2.0, 0.3, 0.0)
        plant = Plant(ImpulseResponse.identity(DT), slew_limit=0.84)
        _, out = apply_plant(t, step, plant)
        assert np.max(np.abs(np.diff(out))) == pytest.approx(slew_in_lambda(0.84) * DT, rel=1e-12)
        assert out[-1] == pytest.approx(0.3)

    def test_slew_units(self):
        # 2 pi of phase moves the lattice by one site
        assert slew_in_lambda(2 * math.pi) == pytest.approx(SITE_LAMBDA)

    def test_noise_is_seeded(self):
        t, x = smooth_ramp()
        plant = Plant(ImpulseResponse.identity(DT), slew_limit=None, noise_rms_nm=0.1)
        a = apply_plant(t, x, plant, seed=4)[1]
        b = apply_plant(t, x, plant, seed=4)[1]
        assert np.array_equal(a, b)
        rms_nm = np.std(a - x) * plant.lambda_nm
        assert rms_nm == pytest.approx(0.1, rel=0.1)

    def test_rate_mismatch(self):
        t = np.arange(0.0, 5.0, 0.1)
        x = np.sin(t)
        with pytest.raises(ValueError):
            apply_plant(t, x, Plant.linear())
        t2, out = apply_plant(t, x, Plant.linear(), resample=True)
        assert np.allclose(np.diff(t2), DT)
        assert len(out) == len(t2)


class TestDeconvolve:
    def test_identity_kernel(self):
        _, x = smooth_ramp()
        assert np.allclose(deconvolve(x, ImpulseResponse.identity(DT), reg=0.0), x, atol=1e-14)

    def test_low_pass_optimal_trajectory(self, optimal_target):
        t, target = optimal_target
        plant = Plant.linear()
        _, out = apply_plant(t, deconvolve(target, plant.kernel, 1e-3), plant)
        assert np.max(np.abs(out - target)) < 0.02 * SITE_LAMBDA

    @settings(max_examples=10)
    @given(duration=st.floats(10.0, 60.0), amp=st.floats(0.1, 3.0))
    def test_round_trip_floor(self, duration, amp):
        t, x = smooth_ramp(duration)
        plant = Plant.linear()
        _, out = apply_plant(t, deconvolve(amp * x, plant.kernel, 1e-3), plant)
        assert np.max(np.abs(out - amp * x)) < 0.005 * SITE_LAMBDA * amp

    def test_over_regularized(self):
        t, x = smooth_ramp()
        plant = Plant.linear()
        errs = [np.max(np.abs(apply_plant(t, deconvolve(x, plant.kernel, r), plant)[1] - x)) for r in (1e-3, 1e-1, 10.0)]
        assert errs[0] < errs[1] < errs[2]
        big = deconvolve(x, plant.kernel, 1e6)
        assert np.max(np.abs(big)) < 1e-5 * np.max(np.abs(x))


class TestIteration:
    def test_linear_plant_converges_fast(self, optimal_target):
        t, target = optimal_target
        res = iterate_compensation(t, target, Plant.linear(), max_iter=3, threshold=1e-3 * SITE_LAMBDA)
        assert res.converged
        assert len(res.history) <= 3
        assert np.all(np.diff(res.history) <= 0)

    def test_saturating_plant(self, optimal_target):
        t, target = optimal_target
        res = iterate_compensation(t, target, Plant(), max_iter=10, threshold=0.0)
        assert len(res.history) == 10
        assert min(res.history) < 0.02 * SITE_LAMBDA
        assert np.max(np.abs(res.actual - target)) < 0.02 * SITE_LAMBDA

    def test_uncompensated_drive_is_worse(self, optimal_target):
        t, target = optimal_target
        _, raw = apply_plant(t, target, Plant())
        assert np.max(np.abs(raw - target)) > 0.02 * SITE_LAMBDA

    def test_zero_gain_keeps_history(self):
        t, x = smooth_ramp()
        res = iterate_compensation(t, x, Plant(), gain=0.0, max_iter=5, threshold=0.0)
        assert len(res.history) == 5
        assert np.ptp(res.history) == 0.0

    def test_history_non_increasing_for_linear_plant(self):
        t, x = smooth_ramp(15.0)
        res = iterate_compensation(t, x, Plant.linear(), max_iter=8, threshold=0.0, reg=1e-2)
        assert np.all(np.diff(res.history) <= 1e-15)

    def test_overdriven_loop_diverges(self):
        t, x = smooth_ramp()
        with pytest.raises(InstabilityError) as err:
            iterate_compensation(t, x, Plant.linear(), gain=2.5, max_iter=10, threshold=0.0)
        hist = err.value.history
        assert len(hist) >= 4
        assert hist[-1] > hist[-2] > hist[-3] > hist[-4]

    def test_negative_gain(self):
        t, x = smooth_ramp()
        with pytest.raises(ValueError):
            iterate_compensation(t, x, Plant(), gain=-0.1)


class TestBridges:
    def test_sampling_round_trip(self):
        tr = adiabatic_sine(SITE, 1.5 * P150.tau_ho)
        t_us, x = sample_trajectory(tr, P150)
        assert x[0] == 0.0 and x[-1] == pytest.approx(SITE_LAMBDA)
        back = as_trajectory(t_us, x, P150)
        t = np.linspace(0.0, tr.tau, 57)
        assert np.allclose(back.position(t), tr.position(t), atol=1e-4)

    def test_signal_csv(self, tmp_path):
        t, x = smooth_ramp()
        save_signal_csv(tmp_path / "s.csv", t, x)
        t2, x2 = load_signal_csv(tmp_path / "s.csv")
        assert np.allclose(t2, t) and np.allclose(x2, x, rtol=1e-11)
        np.savetxt(tmp_path / "bare.csv", np.column_stack([t, x]), delimiter=",")
        t3, _ = load_signal_csv(tmp_path / "bare.csv")
        assert len(t3) == len(t)

    def test_end_to_end_penalty(self, optimized):
        res = end_to_end_fidelity(optimized(150.0, 1.5).trajectory, P150)
        assert abs(res.penalty) < 0.01
        assert res.history[-1] < 0.02 * SITE_LAMBDA
