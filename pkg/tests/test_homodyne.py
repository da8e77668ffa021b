import math

import numpy as np
import pytest

from app.schemas import LatticeModel
from app.services.base import GridUnderflowError, SignalError, ZeroSignalError
from app.services.budget import truncation_bias_bound
from app.services.dynamics import Propagator, evolve_exact
from app.services.fock import ModeOperator, coherent_product, expectation, reduced_density_matrix
from app.services.homodyne import (
    PhaseSignal,
    QuadratureSampler,
    TimeLedger,
    closed_form_b,
    estimate_shared,
    estimate_truncated_b,
    hermite_functions,
    quadrature_distribution,
    sample_quadrature,
    signal_for_omega,
    signal_for_xi,
    truncated_mean,
    truncated_moments,
)
from app.services.lattice import build_hamiltonian


def _density(alpha, cutoff=16):
    return reduced_density_matrix(coherent_product([alpha], cutoff), 0)


class TestQuadratureDistribution:
    def test_hermite_functions_are_orthonormal(self):
        step = 0.01
        x = np.arange(-12, 12 + step, step)
        phi = hermite_functions(6, x)
        np.testing.assert_allclose(phi @ phi.T * step, np.eye(7), atol=1e-8)

    @pytest.mark.parametrize("alpha,quadrature,expected", [
        (0.5, "x", math.sqrt(2) * 0.5),
        (0.5, "p", 0.0),
        (0.7j, "p", math.sqrt(2) * 0.7),
    ])
    def test_mean_matches_amplitude(self, alpha, quadrature, expected):
        sampler = QuadratureSampler(quadrature=quadrature)
        grid, pdf = quadrature_distribution(_density(alpha), sampler)
        mean, _, kept = truncated_moments(grid, pdf, sampler.step, sampler.x_max)
        assert mean == pytest.approx(expected, abs=1e-6)
        assert kept == pytest.approx(1.0, abs=1e-9)

    def test_narrow_grid_underflows(self):
        with pytest.raises(GridUnderflowError):
            quadrature_distribution(_density(0.5), QuadratureSampler(x_max=1.0))

    def test_sampler_grid_covers_threshold(self):
        sampler = QuadratureSampler.for_threshold(0, "x", 20.0, cutoff=12)
        assert sampler.x_max == pytest.approx(math.sqrt(25) + 8.0)
        assert QuadratureSampler.for_threshold(0, "x", 2.0, cutoff=12).x_max == 6.0


class TestSampling:
    def test_exact_draws_follow_distribution(self, rng):
        draws = sample_quadrature(_density(0.4), QuadratureSampler(), rng, size=20000)
        assert draws.mean() == pytest.approx(math.sqrt(2) * 0.4, abs=0.03)
        assert draws.var() == pytest.approx(0.5, abs=0.03)

    def test_threshold_discards_tails(self, rng):
        sampler = QuadratureSampler()
        grid, pdf = quadrature_distribution(_density(0.4), sampler)
        kept_mean, _, kept = truncated_moments(grid, pdf, sampler.step, 0.5)
        assert kept < 0.5
        estimate = truncated_mean(grid, pdf, sampler.step, 0.5, 50000, rng, "exact")
        assert estimate == pytest.approx(kept_mean, abs=0.01)

    def test_clt_and_exact_agree(self, rng):
        sampler = QuadratureSampler()
        grid, pdf = quadrature_distribution(_density(0.3), sampler)
        exact = truncated_mean(grid, pdf, sampler.step, 6.0, 100000, rng, "exact")
        normal = truncated_mean(grid, pdf, sampler.step, 6.0, 100000, rng, "clt")
        assert exact == pytest.approx(normal, abs=0.02)

    def test_shared_batch_charges_ledger_once(self, rng):
        ledger = TimeLedger()
        densities = {0: _density(0.4), 3: _density(0.2j)}
        values = estimate_shared(densities, M=8.0, L=10000, rng=rng, ledger=ledger, t=2.0, sampling="clt")
        assert set(values) == {0, 3}
        assert values[0] == pytest.approx(0.4, abs=0.05)
        assert ledger.experiments == 20000
        assert ledger.evolution_time == pytest.approx(40000.0)
        assert ledger.shots == 40000


class TestTruncatedEstimator:
    @staticmethod
    def _evolved(alpha, t, cutoff=16):
        model = LatticeModel(num_modes=1, omega=[0.7], xi=[0.3])
        return evolve_exact(build_hamiltonian(model, cutoff), coherent_product([alpha], cutoff), t)

    @staticmethod
    def _truncated_b(rho, M):
        means = []
        for quadrature in ("x", "p"):
            sampler = QuadratureSampler.for_threshold(0, quadrature, M, rho.shape[0] - 1)
            grid, pdf = quadrature_distribution(rho, sampler)
            means.append(truncated_moments(grid, pdf, sampler.step, M)[0])
        return complex(*means) / math.sqrt(2)

    def test_large_threshold_recovers_the_amplitude(self, rng):
        estimate = estimate_truncated_b(lambda: coherent_product([0.3], 12), M=20.0, L=100000, rng=rng)
        assert abs(estimate - 0.3) < 0.01

    @pytest.mark.parametrize("M", [2.0, 4.0, 8.0])
    def test_bias_stays_within_bound(self, M, rng):
        state = self._evolved(0.5, 1.3)
        estimate = estimate_truncated_b(lambda: state, M=M, L=10 ** 12, rng=rng, sampling="clt")
        exact = closed_form_b(0.5, 0.7, 0.3, 1.3)
        assert abs(estimate - exact) <= truncation_bias_bound(0.5, M) + 1e-5

    def test_hoeffding_failure_rate_below_delta(self, rng):
        M, eta, delta, repeats = 3.0, 0.3, 0.1, 200
        # two quadratures, each two-sided: 4 exp(-L eta^2 / 2M^2) <= delta
        L = math.ceil(2 * M ** 2 / eta ** 2 * math.log(4 / delta))
        state = self._evolved(0.4, 2.0)
        target = self._truncated_b(reduced_density_matrix(state, 0), M)
        failures = sum(
            abs(estimate_truncated_b(lambda: state, M=M, L=L, rng=rng, sampling="exact") - target) > eta
            for _ in range(repeats)
        )
        assert failures / repeats <= delta

    def test_each_quadrature_is_charged(self, rng):
        ledger = TimeLedger()
        estimate_truncated_b(lambda: _density(0.4), M=6.0, L=500, rng=rng, ledger=ledger, t=1.5, sampling="clt")
        assert ledger.experiments == 1000
        assert ledger.evolution_time == pytest.approx(1500.0)
        assert ledger.batches == 2

    def test_rejects_bad_arguments(self, rng):
        with pytest.raises(SignalError):
            estimate_truncated_b(lambda: _density(0.4), M=0.0, L=10, rng=rng)
        with pytest.raises(SignalError):
            estimate_truncated_b(lambda: _density(0.4), M=2.0, L=0, rng=rng)


class TestSignals:
    def test_closed_form_matches_simulation(self):
        model = LatticeModel(num_modes=1, omega=[0.7], xi=[0.3])
        cutoff = 24
        state = Propagator(build_hamiltonian(model, cutoff)).evolve(coherent_product([0.5], cutoff), 2.0)
        simulated = expectation(ModeOperator("annihilate", 0), state)
        assert simulated == pytest.approx(closed_form_b(0.5, 0.7, 0.3, 2.0), abs=1e-6)

    def test_omega_signal_is_normalized(self):
        signal = signal_for_omega(0.2 - 0.2j, t=1.0)
        assert signal.value == pytest.approx((1 - 1j) / math.sqrt(2))

    def test_zero_signal_is_an_error(self):
        with pytest.raises(ZeroSignalError):
            signal_for_omega(0j)
        with pytest.raises(ZeroSignalError):
            PhaseSignal(0j)

    @pytest.mark.parametrize("t", [0.5, 2.0, 7.0])
    def test_xi_signal_from_exact_amplitudes(self, t):
        omega, xi = 0.7, 0.3
        z1 = closed_form_b(0.5, omega, xi, t)
        z2 = closed_form_b(0.9, omega, xi, t)
        signal = signal_for_xi(z1, z2, 0.5, 0.9, t)
        assert signal.value == pytest.approx(complex(math.cos(xi * t), math.sin(xi * t)), abs=1e-9)
        assert signal.conjugate().value == pytest.approx(complex(math.cos(xi * t), -math.sin(xi * t)), abs=1e-9)
        assert signal.clamped == 0

    @pytest.mark.parametrize("xi", [0.3, -0.5])
    def test_xi_signal_ignores_amplitude_order(self, xi):
        omega, t = 0.7, 1.5
        z1 = closed_form_b(0.5, omega, xi, t)
        z2 = closed_form_b(0.9, omega, xi, t)
        forward = signal_for_xi(z1, z2, 0.5, 0.9, t)
        swapped = signal_for_xi(z2, z1, 0.9, 0.5, t)
        assert swapped.value == pytest.approx(forward.value, abs=1e-9)
        assert swapped.value.imag == pytest.approx(math.sin(xi * t), abs=1e-9)
