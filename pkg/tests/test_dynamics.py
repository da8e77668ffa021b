import numpy as np
import pytest

from app.schemas import Coupling, LatticeModel
from app.services.base import ConfigError
from app.services.bounds import fit_slope
from app.services.dynamics import (
    PairRotation,
    Propagator,
    RandomizationPlan,
    SpamChannel,
    apply_two_mode,
    deviation_scan,
    effective_hamiltonian,
    evolve_exact,
    evolve_randomized,
    numeric_phase_average,
    rotated_frame_hamiltonian,
    spam_density,
    spam_mixture,
    trace_distance,
    two_mode_rotation,
)
from app.services.fock import (
    ModeOperator,
    coherent_product,
    embed,
    expectation,
    fidelity,
    local_operator,
    number_state,
)
from app.services.homodyne import closed_form_b
from app.services.lattice import build_hamiltonian, chain, occupation_table, random_model, total_number


def _pair_state(vector, cutoff):
    """Two-mode state from occupation -> amplitude pairs."""
    amplitudes = np.zeros((cutoff + 1) ** 2, dtype=complex)
    for (n1, n2), value in vector.items():
        amplitudes[n1 * (cutoff + 1) + n2] = value
    return amplitudes


class TestExactEvolution:
    def test_harmonic_mode_rotates_coherent_state(self):
        model = LatticeModel(num_modes=1, omega=[0.7], xi=[0.0])
        state = coherent_product([0.5], cutoff=16)
        evolved = Propagator(build_hamiltonian(model, 16)).evolve(state, 2.0)
        expected = coherent_product([0.5 * np.exp(-1.4j)], cutoff=16)
        assert fidelity(evolved, expected) >= 1 - 1e-9

    def test_zero_time_is_identity(self, pair_model):
        state = coherent_product([0.4, 0.1], cutoff=6)
        evolved = Propagator(build_hamiltonian(pair_model, 6)).evolve(state, 0.0)
        np.testing.assert_array_equal(evolved.amplitudes, state.amplitudes)

    def test_negative_time_rejected(self, pair_model):
        with pytest.raises(ConfigError):
            Propagator(build_hamiltonian(pair_model, 3)).evolve(coherent_product([0.1, 0.1], 3), -1.0)

    @pytest.mark.parametrize("omega,xi,t", [(0.7, 0.3, 2.0), (-0.4, 0.9, 5.0), (0.0, -0.6, 0.7)])
    def test_exact_evolution_matches_closed_form(self, omega, xi, t):
        cutoff = 24
        hamiltonian = build_hamiltonian(LatticeModel(num_modes=1, omega=[omega], xi=[xi]), cutoff)
        evolved = evolve_exact(hamiltonian, coherent_product([0.5], cutoff), t)
        simulated = expectation(ModeOperator("annihilate", 0), evolved)
        assert simulated == pytest.approx(closed_form_b(0.5, omega, xi, t), abs=1e-6)

    def test_exact_evolution_reuses_a_propagator(self, pair_model):
        propagator = Propagator(build_hamiltonian(pair_model, 6))
        state = coherent_product([0.4, 0.1], cutoff=6)
        np.testing.assert_allclose(evolve_exact(propagator, state, 1.2).amplitudes, propagator.evolve(state, 1.2).amplitudes)


class TestRotations:
    @pytest.mark.parametrize("kind", ["x", "y"])
    def test_ladder_transformation_below_cutoff(self, kind):
        """U^dag b1 U = cos(theta) b1 + i sin(theta) b2 (x) or cos(theta) b1 + sin(theta) b2 (y)."""
        cutoff, theta = 6, 0.37
        u = two_mode_rotation(kind, theta, cutoff)
        b1 = embed(local_operator("annihilate", cutoff), 0, 2, cutoff).toarray()
        b2 = embed(local_operator("annihilate", cutoff), 1, 2, cutoff).toarray()
        mixed = 1j * np.sin(theta) * b2 if kind == "x" else np.sin(theta) * b2
        expected = np.cos(theta) * b1 + mixed
        # both sides agree exactly on states with at most `cutoff` excitations in total
        inside = occupation_table(2, cutoff).sum(axis=1) <= cutoff
        transformed = u.conj().T @ b1 @ u
        np.testing.assert_allclose(transformed[:, inside], expected[:, inside], atol=1e-10)

    def test_preparation_rotation_spreads_amplitude(self):
        cutoff, alpha = 12, 0.5
        state = apply_two_mode(two_mode_rotation("y", -np.pi / 4, cutoff), (0, 1), coherent_product([alpha, 0.0], cutoff))
        symmetric = (expectation(ModeOperator("annihilate", 0), state) + expectation(ModeOperator("annihilate", 1), state)) / np.sqrt(2)
        assert symmetric == pytest.approx(alpha, abs=1e-8)

    def test_rotations_conserve_number(self):
        cutoff = 4
        u = two_mode_rotation("x", 1.1, cutoff)
        number = total_number(2, cutoff).toarray()
        np.testing.assert_allclose(u.conj().T @ number @ u, number, atol=1e-10)


class TestEffectiveGenerators:
    def test_selection_rule_matches_numeric_average(self):
        model = random_model(3, [(0, 1), (1, 2)], np.random.default_rng(2))
        cutoff = 2
        numeric = numeric_phase_average(build_hamiltonian(model, cutoff), 3, cutoff, [1])
        analytic = build_hamiltonian(effective_hamiltonian(model, [1]), cutoff).toarray()
        np.testing.assert_allclose(numeric, analytic, atol=1e-8)

    def test_stage_b_frame_has_symmetric_mode_frequency(self, pair_model):
        cutoff = 4
        hamiltonian = rotated_frame_hamiltonian(pair_model, "x", cutoff)
        one = _pair_state({(1, 0): 1 / np.sqrt(2), (0, 1): 1 / np.sqrt(2)}, cutoff)
        two = _pair_state({(2, 0): 0.5, (1, 1): 1 / np.sqrt(2), (0, 2): 0.5}, cutoff)
        e1 = np.vdot(one, hamiltonian @ one).real
        e2 = np.vdot(two, hamiltonian @ two).real
        assert e1 == pytest.approx((0.3 + 0.5) / 2 + 0.2, abs=1e-10)
        assert e2 - 2 * e1 == pytest.approx((0.2 + 0.4) / 4, abs=1e-10)
        np.testing.assert_allclose(hamiltonian @ one, e1 * one, atol=1e-10)

    def test_stage_c_frame_has_imaginary_part(self, pair_model):
        cutoff = 3
        hamiltonian = rotated_frame_hamiltonian(pair_model, "y", cutoff)
        one = _pair_state({(1, 0): 1 / np.sqrt(2), (0, 1): -1j / np.sqrt(2)}, cutoff)
        assert np.vdot(one, hamiltonian @ one).real == pytest.approx(0.4 + 0.1, abs=1e-10)

    def test_rotated_frame_needs_pair(self):
        with pytest.raises(ConfigError):
            rotated_frame_hamiltonian(chain(3), "x", 2)


class TestRandomizedEvolution:
    def test_zero_angles_reproduce_exact_evolution(self, pair_model):
        cutoff = 5
        hamiltonian = build_hamiltonian(pair_model, cutoff)
        state = coherent_product([0.4, 0.2], cutoff)
        plan = RandomizationPlan(steps=8, phase_modes=(0,), angle_distribution="zero")
        randomized = evolve_randomized(hamiltonian, state, 1.5, plan, np.random.default_rng(0))
        exact = Propagator(hamiltonian).evolve(state, 1.5)
        np.testing.assert_allclose(randomized.amplitudes, exact.amplitudes, atol=1e-10)

    def test_trajectory_conserves_total_number(self, pair_model, rng):
        cutoff = 5
        state = coherent_product([0.4, 0.0], cutoff)
        plan = RandomizationPlan(steps=16, rotations=(PairRotation("x", (0, 1)),))
        evolved = evolve_randomized(build_hamiltonian(pair_model, cutoff), state, 2.0, plan, rng)
        number = total_number(2, cutoff)
        assert expectation(number, evolved).real == pytest.approx(expectation(number, state).real, abs=1e-9)

    def test_overlapping_targets_rejected(self):
        with pytest.raises(ConfigError):
            RandomizationPlan(steps=4, phase_modes=(0,), rotations=(PairRotation("x", (0, 1)),))

    def test_deviation_decays_as_inverse_steps(self):
        model = LatticeModel(
            num_modes=2, omega=[0.3, 0.5], xi=[0.2, 0.4], couplings=[Coupling(i=0, j=1, re=0.2, im=0.1)]
        )
        cutoff = 3
        scan = deviation_scan(model, cutoff, 1.0, [8, 16, 32, 64], [0], coherent_product([0.4, 0.4], cutoff))
        fit = fit_slope([r for r, _ in scan], [d for _, d in scan])
        assert fit.slope == pytest.approx(-1.0, abs=0.15)


class TestSpam:
    def test_zero_strength_is_identity(self, rng):
        state = coherent_product([0.3], cutoff=6)
        components = spam_mixture(SpamChannel(0.0), state, rng, kicks=4)
        assert len(components) == 1
        assert components[0][0] == 1.0 and components[0][1] is state

    def test_strength_out_of_range(self):
        with pytest.raises(ConfigError):
            SpamChannel(strength=1.0)

    def test_weak_channel_keeps_fidelity(self, rng):
        state = coherent_product([0.4], cutoff=10)
        components = spam_mixture(SpamChannel(0.05), state, rng, kicks=8)
        assert sum(w for w, _ in components) == pytest.approx(1.0)
        assert sum(w * fidelity(state, c) for w, c in components) >= 0.95

    def test_replace_channel_mixes_in_vacuum(self, rng):
        rho = np.outer(number_state((2,), 3).amplitudes, number_state((2,), 3).amplitudes.conj())
        mixed = spam_density(SpamChannel(0.1, kind="replace"), rho, rng, kicks=1)
        assert mixed[0, 0].real == pytest.approx(0.1)
        assert mixed[2, 2].real == pytest.approx(0.9)
        assert trace_distance(mixed, rho) == pytest.approx(0.1)
