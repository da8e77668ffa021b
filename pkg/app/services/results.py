"""
Report and table persistence.

report.json holds everything that is a function of (config, seed) plus a
run_info block (timestamps, wall times) that is excluded from determinism.
CSV tables have fixed headers and carry the config hash and library version
on every row.
"""
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from app import __version__
from app.schemas import BoundCheck, EstimationReport, ExperimentConfig, ScalingRecord, TrialRecord
from app.services.base import config_hash


logger = logging.getLogger(__name__)

TRIAL_COLUMNS = [
    "config_hash", "library_version", "trial", "parameter", "estimate", "true_value",
    "error", "evolution_time", "shots", "experiments",
]
SCALING_COLUMNS = [
    "config_hash", "library_version", "row_kind", "series", "epsilon", "rmse_omega", "rmse_xi",
    "rmse_re_h", "rmse_im_h", "evolution_time", "experiments", "shots", "sql_shots", "sql_rmse",
    "sql_evolution_time", "slope", "slope_ci_low", "slope_ci_high", "fit_available",
]
BOUND_COLUMNS = ["config_hash", "library_version", "suite", "case", "measured", "bound", "passed", "detail"]


def experiment_hash(config: ExperimentConfig) -> str:
    return config_hash(config.model_dump(mode="json"))


def _stamp(config: ExperimentConfig) -> Dict[str, str]:
    return {"config_hash": experiment_hash(config), "library_version": __version__}


def _write_table(path: Path, rows: List[Dict[str, Any]], columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(columns)).to_csv(path, index=False)
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def write_trials_csv(directory: Path, config: ExperimentConfig, records: Sequence[TrialRecord]) -> Path:
    rows = [{**_stamp(config), **r.model_dump()} for r in records]
    return _write_table(Path(directory) / "trials.csv", rows, TRIAL_COLUMNS)


def write_scaling_csv(directory: Path, config: ExperimentConfig, records: Sequence[ScalingRecord]) -> Path:
    rows = [{**_stamp(config), **r.model_dump()} for r in records]
    return _write_table(Path(directory) / "scaling.csv", rows, SCALING_COLUMNS)


def write_bounds_csv(directory: Path, config: ExperimentConfig, checks: Sequence[BoundCheck]) -> Path:
    rows = [{**_stamp(config), **c.model_dump()} for c in checks]
    return _write_table(Path(directory) / "bounds.csv", rows, BOUND_COLUMNS)


def report_body(
    config: ExperimentConfig,
    reports: Sequence[EstimationReport],
    summary: Dict[str, Optional[float]],
) -> Dict[str, Any]:
    """Deterministic part of report.json."""
    return {
        **_stamp(config),
        "schema_version": config.schema_version,
        "config": config.model_dump(mode="json"),
        "summary": {"rmse": summary, "trials": len(reports)},
        "trials": [r.model_dump(mode="json", exclude={"wall_time"}) for r in reports],
    }


def write_report(
    directory: Path,
    config: ExperimentConfig,
    reports: Sequence[EstimationReport],
    summary: Dict[str, Optional[float]],
    started: Optional[datetime] = None,
) -> Path:
    body = report_body(config, reports, summary)
    body["run_info"] = {
        "started": (started or datetime.now(timezone.utc)).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_times": [r.wall_time for r in reports],
    }
    path = Path(directory) / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote report to {path}")
    return path
