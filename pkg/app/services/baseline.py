"""
Standard-quantum-limit control: fixed evolution time, repeated sampling.

Every shot evolves for t0 = 1/W~. Two coherent amplitudes give the phases
-omega t0 - |alpha_k|^2 sin(xi t0), a 2x2 linear system for (omega t0, sin(xi t0)).
The shot count is set from the exact per-shot variance so the predicted RMSE
equals epsilon, so samples grow as epsilon^-2.
"""
import cmath
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from app.schemas import LatticeModel, ProtocolConfig, ShotSampling
from app.services.base import StreamPart, make_rng
from app.services.dynamics import Propagator, evolve_exact
from app.services.fock import check_truncation, coherent_state, reduced_density_matrix
from app.services.homodyne import QuadratureSampler, quadrature_distribution, truncated_mean, truncated_moments
from app.services.lattice import build_hamiltonian
from app.services.rfe import RfeSchedule


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadratureData:
    grid: np.ndarray
    pdf: np.ndarray
    step: float
    mean: float
    variance: float


@dataclass(frozen=True)
class SqlResult:
    estimates: Dict[str, float]
    shots: int
    evolution_time: float


def _quadratures(rho: np.ndarray, step: float) -> Dict[str, QuadratureData]:
    cutoff = rho.shape[0] - 1
    data = {}
    for quadrature in ("x", "p"):
        sampler = QuadratureSampler.for_threshold(0, quadrature, 6.0, cutoff, step)
        grid, pdf = quadrature_distribution(rho, sampler)
        mean, second, _ = truncated_moments(grid, pdf, sampler.step, sampler.x_max)
        data[quadrature] = QuadratureData(grid, pdf, sampler.step, mean, max(second - mean * mean, 0.0))
    return data


def phase_variance(data: Dict[str, QuadratureData]) -> float:
    """Per-shot variance of arg Zbar, from the quadrature noise perpendicular to Z."""
    z = complex(data["x"].mean, data["p"].mean) / math.sqrt(2)
    psi = cmath.phase(z)
    perpendicular = (math.sin(psi) ** 2 * data["x"].variance + math.cos(psi) ** 2 * data["p"].variance) / 2
    return perpendicular / abs(z) ** 2


def _mode_densities(
    model: LatticeModel, mode: int, amplitudes: Sequence[float], t0: float, cutoff: int, leak_tol: float
) -> List[np.ndarray]:
    single = LatticeModel(num_modes=1, omega=[model.omega[mode]], xi=[model.xi[mode]])
    propagator = Propagator(build_hamiltonian(single, cutoff), leak_tol)
    densities = []
    for a in amplitudes:
        prepared = coherent_state(a, 1, 0, cutoff)
        check_truncation(prepared, leak_tol)
        densities.append(reduced_density_matrix(evolve_exact(propagator, prepared, t0, leak_tol), 0))
    return densities


def sql_shots(phase_variances: Sequence[float], alpha1: float, alpha2: float, t0: float, xi_t0: float, epsilon: float) -> int:
    """Shots per quadrature and amplitude so that the larger of the omega, xi standard errors equals epsilon."""
    a1, a2 = alpha1 ** 2, alpha2 ** 2
    beta = a2 - a1
    v1, v2 = phase_variances
    omega_variance = (a2 ** 2 * v1 + a1 ** 2 * v2) / (beta * t0) ** 2
    xi_variance = (v1 + v2) / (beta * t0 * math.cos(xi_t0)) ** 2
    return max(1, math.ceil(max(omega_variance, xi_variance) / epsilon ** 2))


def solve_phases(phases: Sequence[float], alpha1: float, alpha2: float, t0: float) -> Dict[str, float]:
    """Invert phi_k = -omega t0 - |alpha_k|^2 sin(xi t0)."""
    a1, a2 = alpha1 ** 2, alpha2 ** 2
    omega_t0, sine = np.linalg.solve(np.array([[1.0, a1], [1.0, a2]]), -np.asarray(phases))
    return {"omega": float(omega_t0 / t0), "xi": float(math.asin(max(-1.0, min(1.0, sine))) / t0)}


def sql_baseline(
    model: LatticeModel,
    cfg: ProtocolConfig,
    epsilon: float,
    seed: int = 0,
    stream: Sequence[StreamPart] = (),
    sampling: ShotSampling = "clt",
) -> SqlResult:
    """omega_i and xi_i of every mode from decoupled fixed-time experiments."""
    t0 = 1.0 / RfeSchedule(W=cfg.W, epsilon=epsilon).Wtilde
    amplitudes = (cfg.alpha1, cfg.alpha2)
    estimates: Dict[str, float] = {}
    total_shots = 0
    for mode in range(model.num_modes):
        rng = make_rng(seed, *stream, "sql", mode)
        densities = [_quadratures(rho, cfg.grid_step) for rho in _mode_densities(model, mode, amplitudes, t0, cfg.cutoff, cfg.leak_tol)]
        variances = [phase_variance(d) for d in densities]
        shots = sql_shots(variances, *amplitudes, t0, model.xi[mode] * t0, epsilon)
        phases = []
        for data in densities:
            means = [
                truncated_mean(q.grid, q.pdf, q.step, q.grid[-1], shots, rng, sampling, cfg.exact_shot_limit)
                for q in (data["x"], data["p"])
            ]
            phases.append(cmath.phase(complex(*means)))
        solved = solve_phases(phases, *amplitudes, t0)
        estimates[f"omega_{mode}"] = solved["omega"]
        estimates[f"xi_{mode}"] = solved["xi"]
        total_shots += 2 * len(amplitudes) * shots
        logger.debug(f"SQL mode {mode}: {shots} shots per quadrature and amplitude at t0 = {t0:.4g}")
    return SqlResult(estimates, total_shots, total_shots * t0)
