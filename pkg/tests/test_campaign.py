import math

import pytest

from app.schemas import ExperimentConfig, ProtocolConfig
from app.services.base import ConfigError
from app.services.baseline import solve_phases, sql_baseline, sql_shots
from app.services.campaign import parameter_class, run_campaign, run_sweep, sql_point, trial_model


def _random_chain_config(trials=2):
    return ExperimentConfig.model_validate(
        {
            "model": {"kind": "chain", "num_modes": 3, "random_parameters": True},
            "protocol": {"epsilon": 0.1, "shot_sampling": "clt"},
            "campaign": {"trials": trials, "seed": 21},
        }
    )


class TestCampaign:
    def test_parameter_classes(self):
        assert parameter_class("omega_3") == "omega"
        assert parameter_class("re_h_0_1") == "re_h"
        with pytest.raises(ConfigError):
            parameter_class("gamma_0")

    def test_trials_draw_their_own_models(self):
        config = _random_chain_config()
        assert trial_model(config, 0) == trial_model(config, 0)
        assert trial_model(config, 0) != trial_model(config, 1)

    def test_campaign_is_reproducible(self, single_config):
        first = run_campaign(single_config)
        second = run_campaign(single_config)
        assert [r.estimates() for r in first.reports] == [r.estimates() for r in second.reports]
        assert len(first.records()) == 4

    def test_rmse_within_epsilon(self, single_config):
        rmse = run_campaign(single_config).rmse()
        assert rmse["omega"] <= single_config.protocol.epsilon
        assert rmse["xi"] <= single_config.protocol.epsilon
        assert rmse["re_h"] is None

    @pytest.mark.slow
    def test_worker_pool_gives_same_results(self):
        config = _random_chain_config()
        serial = run_campaign(config, workers=1)
        pooled = run_campaign(config, workers=2)
        assert [r.estimates() for r in serial.reports] == [r.estimates() for r in pooled.reports]


class TestBaseline:
    def test_phase_inversion(self):
        t0, omega, xi = 0.9, 0.4, -0.3
        phases = [-omega * t0 - a * a * math.sin(xi * t0) for a in (0.5, 0.9)]
        solved = solve_phases(phases, 0.5, 0.9, t0)
        assert solved["omega"] == pytest.approx(omega)
        assert solved["xi"] == pytest.approx(xi)

    def test_shots_scale_as_inverse_square(self):
        coarse = sql_shots([0.5, 0.3], 0.5, 0.9, 1.0, 0.2, 0.1)
        fine = sql_shots([0.5, 0.3], 0.5, 0.9, 1.0, 0.2, 0.01)
        assert fine / coarse == pytest.approx(100, rel=0.02)

    def test_baseline_estimates_single_mode(self, single_model):
        cfg = ProtocolConfig(cutoff=12)
        result = sql_baseline(single_model, cfg, epsilon=0.02, seed=1)
        assert set(result.estimates) == {"omega_0", "xi_0"}
        assert abs(result.estimates["omega_0"] - 0.7) < 0.1
        assert abs(result.estimates["xi_0"] - 0.3) < 0.1
        assert result.evolution_time == pytest.approx(result.shots / (3 * cfg.W / math.pi))

    def test_exact_draws_match_the_normal_limit(self, single_model):
        cfg = ProtocolConfig()
        exact = sql_baseline(single_model, cfg, epsilon=0.05, seed=2, sampling="exact")
        normal = sql_baseline(single_model, cfg, epsilon=0.05, seed=2, sampling="clt")
        assert exact.shots == normal.shots
        assert abs(exact.estimates["omega_0"] - 0.7) < 0.2
        assert abs(exact.estimates["xi_0"] - 0.3) < 0.2

    def test_rmse_tracks_its_target(self, single_config):
        epsilon = 0.05
        config = single_config.model_copy(
            update={"campaign": single_config.campaign.model_copy(update={"trials": 20})}
        )
        point = sql_point(config, epsilon)
        # shots are sized so the worse of the two standard errors equals epsilon
        assert 0.4 * epsilon <= point["sql_rmse"] <= 1.3 * epsilon
        assert point["sql_evolution_time"] > 0


class TestSweep:
    def test_single_point_has_no_fit(self, single_config):
        rows = run_sweep(single_config, [0.1])
        fits = [r for r in rows if r.row_kind == "fit"]
        assert [r.series for r in fits] == ["protocol", "sql", "sql_rmse"]
        assert all(r.fit_available is False for r in fits)

    def test_empty_sweep_rejected(self, single_config):
        with pytest.raises(ConfigError):
            run_sweep(single_config, [])

    @pytest.mark.slow
    def test_scaling_exponents(self, single_config):
        rows = run_sweep(single_config, [0.1, 0.05, 0.02, 0.01])
        fits = {r.series: r for r in rows if r.row_kind == "fit"}
        assert fits["protocol"].slope == pytest.approx(-1.0, abs=0.15)
        assert fits["sql"].slope == pytest.approx(-2.0, abs=0.2)
        assert fits["sql_rmse"].fit_available
        assert fits["sql_rmse"].slope == pytest.approx(-0.5, abs=0.3)
        points = [r for r in rows if r.row_kind == "point"]
        assert all(r.rmse_omega <= r.epsilon and r.rmse_xi <= r.epsilon for r in points)
