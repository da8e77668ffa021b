import math

import pytest

from app.services.base import ConstraintError
from app.services.budget import (
    check_amplitude,
    omega_budget,
    omega_m_lower_bound,
    truncation_bias_bound,
    xi_budget,
    xi_m_lower_bound,
)


class TestOmegaBudget:
    def test_default_budget_is_consistent(self):
        budget = omega_budget(0.4)
        assert budget.M > budget.M_min == pytest.approx(omega_m_lower_bound(0.4))
        assert 0 <= budget.eta0 < budget.eta0_max
        assert budget.eta1 > 0

    def test_shots_grow_as_delta_shrinks(self):
        budget = omega_budget(0.4)
        assert budget.shots_for_delta(1e-4) > budget.shots_for_delta(1e-2) > 0

    def test_hoeffding_shot_count(self):
        budget = omega_budget(0.4)
        expected = math.ceil(2 * budget.M ** 2 / budget.eta1 ** 2 * math.log(4 / 0.01))
        assert budget.shots_for_delta(0.01) == expected

    def test_amplitude_above_limit(self):
        with pytest.raises(ConstraintError, match="pi/3"):
            check_amplitude(1.05)

    def test_threshold_below_lower_bound(self):
        with pytest.raises(ConstraintError, match="lower bound"):
            omega_budget(0.4, M=omega_m_lower_bound(0.4) * 0.9)

    def test_eta0_outside_range(self):
        budget = omega_budget(0.4)
        with pytest.raises(ConstraintError):
            omega_budget(0.4, eta0=budget.eta0_max * 2)

    def test_invalid_delta(self):
        with pytest.raises(ConstraintError):
            omega_budget(0.4).shots_for_delta(0.0)


class TestXiBudget:
    def test_default_amplitudes(self):
        budget = xi_budget(0.5, 0.9)
        assert budget.M > xi_m_lower_bound(0.5, 0.9)
        assert budget.hoeffding_numerator == 8.0

    def test_equal_amplitudes_rejected(self):
        with pytest.raises(ConstraintError, match="different"):
            xi_budget(0.5, 0.5)


def test_truncation_bias_bound():
    assert truncation_bias_bound(0.5, 3.0) == pytest.approx(0.5)
