"""
Trial campaigns and epsilon sweeps.

Each trial materializes its true model (fixed, or drawn from the trial's own
stream) and runs the configured protocol on an independent RNG stream, so
results do not depend on the number of workers.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from app.schemas import EstimationReport, ExperimentConfig, LatticeModel, ScalingRecord, TrialRecord
from app.services.base import ConfigError, make_rng
from app.services.baseline import sql_baseline
from app.services.bounds import fit_slope
from app.services.lattice import model_from_spec
from app.services.protocols import run_protocol


logger = logging.getLogger(__name__)

PARAMETER_CLASSES = ("omega", "xi", "re_h", "im_h")


def parameter_class(name: str) -> str:
    for prefix in ("re_h", "im_h", "omega", "xi"):
        if name.startswith(prefix + "_"):
            return prefix
    raise ConfigError(f"unknown parameter name: {name}")


def trial_model(config: ExperimentConfig, trial: int) -> LatticeModel:
    return model_from_spec(config.model, make_rng(config.campaign.seed, "trial", trial, "model"))


def run_trial(config: ExperimentConfig, trial: int) -> EstimationReport:
    model = trial_model(config, trial)
    logger.info(f"Trial {trial}: {model.num_modes} modes, epsilon = {config.protocol.epsilon}")
    return run_protocol(model, config.protocol, config.campaign.seed, ("trial", trial))


@dataclass
class CampaignResult:
    reports: List[EstimationReport]

    def records(self) -> List[TrialRecord]:
        return [
            TrialRecord(
                trial=trial,
                parameter=p.name,
                estimate=p.estimate,
                true_value=p.true_value,
                error=p.error,
                evolution_time=p.evolution_time,
                shots=p.shots,
                experiments=p.experiments,
            )
            for trial, report in enumerate(self.reports)
            for p in report.parameters
        ]

    def rmse(self) -> Dict[str, Optional[float]]:
        """sqrt(mean squared error) per parameter class over all trials."""
        squared: Dict[str, List[float]] = {c: [] for c in PARAMETER_CLASSES}
        for report in self.reports:
            for p in report.parameters:
                if p.error is not None:
                    squared[parameter_class(p.name)].append(p.error ** 2)
        return {c: (math.sqrt(float(np.mean(v))) if v else None) for c, v in squared.items()}

    def mean(self, field_name: str) -> float:
        return float(np.mean([getattr(r, field_name) for r in self.reports]))


def run_campaign(config: ExperimentConfig, workers: int = 1) -> CampaignResult:
    trials = range(config.campaign.trials)
    logger.info(f"Campaign: {config.campaign.trials} trials on {workers} worker(s)")
    if workers > 1:
        reports = Parallel(n_jobs=workers)(delayed(run_trial)(config, k) for k in trials)
    else:
        reports = [run_trial(config, k) for k in trials]
    return CampaignResult(list(reports))


def sql_point(config: ExperimentConfig, epsilon: float) -> Dict[str, float]:
    """Pooled omega and xi RMSE of the fixed-time baseline over the campaign trials, with its mean cost."""
    squared, shots, times = [], [], []
    for trial in range(config.campaign.trials):
        model = trial_model(config, trial)
        result = sql_baseline(
            model, config.protocol, epsilon, config.campaign.seed, ("sql", trial), config.protocol.shot_sampling
        )
        truth = model.parameters()
        squared.extend((value - truth[name]) ** 2 for name, value in result.estimates.items())
        shots.append(result.shots)
        times.append(result.evolution_time)
    rmse = math.sqrt(float(np.mean(squared)))
    if rmse > epsilon:
        logger.warning(f"SQL baseline RMSE {rmse:.4g} above its target {epsilon} over {config.campaign.trials} trial(s)")
    return {
        "sql_rmse": rmse,
        "sql_shots": float(np.mean(shots)),
        "sql_evolution_time": float(np.mean(times)),
    }


def _fit_row(series: str, xs: Sequence[float], values: Sequence[float]) -> ScalingRecord:
    fit = fit_slope(xs, values)
    if not fit.available:
        logger.warning(f"{series}: slope fit needs at least 3 points, got {len(xs)}")
    return ScalingRecord(
        row_kind="fit",
        series=series,
        slope=fit.slope,
        slope_ci_low=fit.ci_low,
        slope_ci_high=fit.ci_high,
        fit_available=fit.available,
    )


def run_sweep(config: ExperimentConfig, epsilons: Sequence[float], workers: int = 1) -> List[ScalingRecord]:
    """One point row per epsilon, then log-log fits of cost against epsilon (expected slopes -1, and -2 for SQL shots)."""
    if not epsilons:
        raise ConfigError("sweep needs at least one epsilon")
    rows: List[ScalingRecord] = []
    for epsilon in epsilons:
        point = config.model_copy(update={"protocol": config.protocol.model_copy(update={"epsilon": epsilon})})
        result = run_campaign(point, workers)
        rmse = result.rmse()
        sql = sql_point(point, epsilon) if config.campaign.sql_baseline else {}
        rows.append(
            ScalingRecord(
                series="protocol",
                epsilon=epsilon,
                rmse_omega=rmse["omega"],
                rmse_xi=rmse["xi"],
                rmse_re_h=rmse["re_h"],
                rmse_im_h=rmse["im_h"],
                evolution_time=result.mean("total_evolution_time"),
                experiments=result.mean("total_experiments"),
                shots=result.mean("total_shots"),
                **sql,
            )
        )
        logger.info(f"epsilon = {epsilon}: RMSE {rmse}, evolution time {rows[-1].evolution_time:.4g}")

    points = [r for r in rows if r.row_kind == "point"]
    rows.append(_fit_row("protocol", epsilons, [r.evolution_time for r in points]))
    if config.campaign.sql_baseline:
        rows.append(_fit_row("sql", epsilons, [r.sql_shots for r in points]))
        # shot noise: RMSE against shots should fall with slope -1/2
        rows.append(_fit_row("sql_rmse", [r.sql_shots for r in points], [r.sql_rmse for r in points]))
    return rows
