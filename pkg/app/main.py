import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app import __version__
from app.config import settings
from app.schemas import ExperimentConfig
from app.services.base import VALIDATION_ERRORS, HamiltonianLearningError
from app.services.bounds import run_suites
from app.services.campaign import run_campaign, run_sweep, trial_model
from app.services.results import (
    experiment_hash,
    write_bounds_csv,
    write_report,
    write_scaling_csv,
    write_trials_csv,
)


logging.basicConfig(
    level=getattr(logging, settings.log_level.upper()),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


# ============================================================================
# Presets
# ============================================================================

PRESETS: Dict[str, Dict[str, Any]] = {
    "single": {
        "model": {"kind": "explicit", "num_modes": 1, "omega": [0.7], "xi": [0.3]},
        "protocol": {"epsilon": 1e-2},
        "campaign": {"trials": 1, "seed": 0, "epsilons": [0.1, 0.05, 0.02, 0.01]},
    },
    "two": {
        "model": {
            "kind": "explicit",
            "num_modes": 2,
            "omega": [0.3, 0.5],
            "xi": [0.2, 0.4],
            "couplings": [{"i": 0, "j": 1, "re": 0.2, "im": 0.1}],
        },
        "protocol": {"epsilon": 2e-2},
        "campaign": {"trials": 1, "seed": 0},
    },
    "chain": {
        "model": {"kind": "chain", "num_modes": 4, "random_parameters": True},
        "protocol": {"epsilon": 5e-2},
        "campaign": {"trials": 20, "seed": 0},
    },
    "grid": {
        "model": {"kind": "grid", "rows": 2, "cols": 2, "random_parameters": True},
        "protocol": {"epsilon": 5e-2},
        "campaign": {"trials": 5, "seed": 0},
    },
}


def preset_config(name: str) -> ExperimentConfig:
    return ExperimentConfig.model_validate(PRESETS[name])


# ============================================================================
# Config loading and overrides
# ============================================================================

def load_config(path: str) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return ExperimentConfig.model_validate_json(text)


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Apply CLI flags on top of the file; the result is validated again."""
    data = config.model_dump(mode="json")
    protocol_flags = {
        "epsilon": "epsilon",
        "protocol": "name",
        "dynamics": "dynamics",
        "spam_strength": "spam_strength",
        "cutoff": "cutoff",
        "shot_sampling": "shot_sampling",
    }
    for flag, field_name in protocol_flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            data["protocol"][field_name] = value
    for flag in ("seed", "trials", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            data["campaign"][flag] = value
    if getattr(args, "epsilons", None):
        data["campaign"]["epsilons"] = args.epsilons
    if getattr(args, "suites", None):
        data["verify"]["suites"] = args.suites
    return ExperimentConfig.model_validate(data)


def output_directory(config: ExperimentConfig, args: argparse.Namespace) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    return Path(settings.resolve_output_dir(config.output.directory))


def worker_count(config: ExperimentConfig) -> int:
    return config.campaign.workers or settings.default_workers


# ============================================================================
# Commands
# ============================================================================

def cmd_learn(config: ExperimentConfig, args: argparse.Namespace) -> int:
    started = datetime.now(timezone.utc)
    directory = output_directory(config, args)
    result = run_campaign(config, worker_count(config))
    if "json" in config.output.formats:
        write_report(directory, config, result.reports, result.rmse(), started)
    if "csv" in config.output.formats:
        write_trials_csv(directory, config, result.records())
    logger.info(f"Learned {len(result.reports[0].parameters)} parameters per trial; RMSE {result.rmse()}")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, args: argparse.Namespace) -> int:
    epsilons = config.campaign.epsilons
    if not epsilons:
        logger.error("sweep needs epsilons (--epsilons or campaign.epsilons)")
        return EXIT_VALIDATION
    directory = output_directory(config, args)
    records = run_sweep(config, epsilons, worker_count(config))
    if "csv" in config.output.formats:
        write_scaling_csv(directory, config, records)
    if "json" in config.output.formats:
        path = directory / "scaling.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {
            "config_hash": experiment_hash(config),
            "library_version": __version__,
            "rows": [r.model_dump(mode="json") for r in records],
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    for record in records:
        if record.row_kind == "fit":
            logger.info(f"{record.series}: slope {record.slope} (CI {record.slope_ci_low}, {record.slope_ci_high})")
    return EXIT_OK


def cmd_verify_bounds(config: ExperimentConfig, args: argparse.Namespace) -> int:
    checks = run_suites(config, trial_model(config, 0))
    write_bounds_csv(output_directory(config, args), config, checks)
    for row in checks:
        verdict = "PASS" if row.passed else "FAIL"
        print(f"{verdict}  {row.suite:<15} {row.case:<40} measured={row.measured:.4g} bound={row.bound:.4g}")
    failed = [row for row in checks if not row.passed]
    logger.info(f"verify-bounds: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_OK


def cmd_gen_config(args: argparse.Namespace) -> int:
    text = preset_config(args.preset).model_dump_json(indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        logger.info(f"Wrote {args.preset} config to {args.output}")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "learn": cmd_learn,
    "sweep": cmd_sweep,
    "verify-bounds": cmd_verify_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamlearn", description="Bosonic Hamiltonian learning harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        command = sub.add_parser(name)
        command.add_argument("config", help="experiment config (JSON)")
        command.add_argument("--output", help="output directory")
        command.add_argument("--seed", type=int)
        command.add_argument("--trials", type=int)
        command.add_argument("--workers", type=int)
        command.add_argument("--epsilon", type=float)
        command.add_argument("--protocol", choices=["auto", "single_mode", "two_mode", "lattice"])
        command.add_argument("--dynamics", choices=["effective", "randomized"])
        command.add_argument("--spam-strength", dest="spam_strength", type=float)
        command.add_argument("--cutoff", type=int)
        command.add_argument("--shot-sampling", dest="shot_sampling", choices=["exact", "clt", "auto"])
        if name == "sweep":
            command.add_argument("--epsilons", type=float, nargs="+")
        if name == "verify-bounds":
            command.add_argument("--suites", nargs="+")

    gen = sub.add_parser("gen-config")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="single")
    gen.add_argument("--output", help="write to this path instead of stdout")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-config":
            return cmd_gen_config(args)
        config = apply_overrides(load_config(args.config), args)
        logger.info(f"{args.command}: config {experiment_hash(config)}")
        return COMMANDS[args.command](config, args)
    except ValidationError as exc:
        logger.error(f"Invalid config: {exc}")
        return EXIT_VALIDATION
    except VALIDATION_ERRORS as exc:
        logger.error(f"Invalid config: {exc}")
        return EXIT_VALIDATION
    except (HamiltonianLearningError, OSError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
