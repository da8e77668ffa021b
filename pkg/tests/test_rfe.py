import math

import numpy as np
import pytest

from app.services.base import ZeroSignalError
from app.services.bounds import fit_slope
from app.services.homodyne import PhaseSignal
from app.services.rfe import (
    RfeSchedule,
    contract_provider,
    modular_distance,
    noise_free_provider,
    rfe_run,
    wrap_to_pi,
)


class TestSchedule:
    def test_iteration_count_and_times(self):
        schedule = RfeSchedule(W=1.05, epsilon=1e-2)
        assert schedule.J == 9
        times = schedule.times()
        assert times[0] == pytest.approx(1 / schedule.Wtilde)
        assert all(b == pytest.approx(2 * a) for a, b in zip(times, times[1:]))

    def test_coarse_epsilon_still_runs_once(self):
        assert RfeSchedule(W=1.0, epsilon=100.0).J == 1

    def test_deltas_match_closed_form(self):
        schedule = RfeSchedule(W=1.05, epsilon=1e-3)
        norm = 2 ** schedule.J - 1
        for j, (delta, scale) in enumerate(zip(schedule.deltas(), schedule.error_scales())):
            assert 0 < delta <= 1
            assert delta == pytest.approx(min(1.0, 3 * 1e-6 / (4 * scale ** 2) * 2 ** j / norm))
            if j >= 1:
                assert delta == pytest.approx(schedule.algorithm_delta(j))

    @pytest.mark.parametrize("epsilon", [1e-1, 1e-2, 1e-4])
    def test_failure_budget(self, epsilon):
        schedule = RfeSchedule(W=1.05, epsilon=epsilon)
        assert schedule.failure_budget() <= 0.75 * epsilon ** 2 * (1 + 1e-12)


class TestModularArithmetic:
    def test_modular_distance(self):
        assert modular_distance(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
        assert modular_distance(np.array([0.0, math.pi]), 0.0).tolist() == pytest.approx([0.0, math.pi])

    def test_wrap_to_pi(self):
        assert wrap_to_pi(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_to_pi(-0.3) == pytest.approx(-0.3)


class TestRfeRun:
    @pytest.mark.parametrize("omega", [-1.0, -0.37, 0.0, 0.5, 0.999])
    def test_noise_free_signals_land_within_epsilon(self, omega):
        schedule = RfeSchedule(W=1.05, epsilon=1e-3)
        result = rfe_run(noise_free_provider(omega), schedule)
        assert abs(result.estimate - omega) <= 1e-3
        assert len(result.track.theta_history) == schedule.J + 1
        assert result.total_time == pytest.approx(sum(schedule.times()))
        assert result.failure_budget == pytest.approx(schedule.failure_budget())
        assert result.failure_budget <= 0.75 * 1e-6 * (1 + 1e-12)

    def test_contract_signals_meet_rmse(self):
        epsilon = 1e-2
        schedule = RfeSchedule(W=1.05, epsilon=epsilon)
        eta = 0.5
        c_f = math.pi / 3 - 0.01 - 2 * math.asin(eta / 2)
        rng = np.random.default_rng(11)
        squared = []
        for _ in range(1000):
            omega = rng.uniform(-1.0, 1.0)
            result = rfe_run(contract_provider(omega, eta, c_f, rng), schedule)
            squared.append((result.estimate - omega) ** 2)
        assert math.sqrt(np.mean(squared)) <= epsilon

    def test_total_time_scales_inversely_with_epsilon(self):
        epsilons = [1e-1, 1e-2, 1e-3, 1e-4]
        rng = np.random.default_rng(0)
        times = [
            rfe_run(contract_provider(0.3, 0.5, 0.2, rng, adversarial=False), RfeSchedule(W=1.05, epsilon=e)).total_time
            for e in epsilons
        ]
        fit = fit_slope(epsilons, times)
        assert fit.slope == pytest.approx(-1.0, abs=0.15)

    def test_zero_signal_becomes_fallback(self):
        def provider(t, delta):
            raise ZeroSignalError("no signal")

        schedule = RfeSchedule(W=1.05, epsilon=0.1)
        result = rfe_run(provider, schedule)
        assert result.fallbacks == schedule.J
        assert result.estimate == pytest.approx(0.0)

    def test_clamps_and_shots_are_summed(self):
        def provider(t, delta):
            return PhaseSignal(1.0 + 0j, t=t, shots=10, delta=delta, clamped=1)

        schedule = RfeSchedule(W=1.05, epsilon=0.1)
        result = rfe_run(provider, schedule)
        assert result.clamps == schedule.J
        assert result.shots == 10 * schedule.J
