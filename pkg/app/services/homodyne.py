"""
Simulated homodyne detection and the unit-circle signals built from it.

Quadrature samples are drawn from the position-space density of a single-mode
(possibly mixed) state expanded in Hermite functions. Samples with |x| > M are
discarded by zero-replacement, so the sample mean estimates <X 1{|X|<=M}>.
"""
import cmath
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Literal, Optional, Tuple, Union

import numpy as np

from app.schemas import ShotSampling
from app.services.base import GridUnderflowError, SignalError, ZeroSignalError
from app.services.fock import FockVector, reduced_density_matrix


logger = logging.getLogger(__name__)

Quadrature = Literal["x", "p"]
MASS_TOL = 1e-6
SUPPORT_MARGIN = 8.0


# ============================================================================
# Position-space densities
# ============================================================================

def hermite_functions(n_max: int, x: np.ndarray) -> np.ndarray:
    """phi_0..phi_{n_max} evaluated on x by the normalized three-term recurrence."""
    x = np.asarray(x, dtype=float)
    phi = np.zeros((n_max + 1, x.size))
    phi[0] = np.pi ** -0.25 * np.exp(-x * x / 2)
    if n_max >= 1:
        phi[1] = np.sqrt(2.0) * x * phi[0]
    for n in range(1, n_max):
        phi[n + 1] = np.sqrt(2.0 / (n + 1)) * x * phi[n] - np.sqrt(n / (n + 1)) * phi[n - 1]
    return phi


@dataclass(frozen=True)
class QuadratureSampler:
    mode: int = 0
    quadrature: Quadrature = "x"
    x_max: float = 6.0
    step: float = 0.01

    @classmethod
    def for_threshold(cls, mode: int, quadrature: Quadrature, M: float, cutoff: int, step: float = 0.01) -> "QuadratureSampler":
        """Grid reaching max(6, M+2), capped where truncated-space wavefunctions carry no mass."""
        x_max = min(max(6.0, M + 2.0), math.sqrt(2 * cutoff + 1) + SUPPORT_MARGIN)
        return cls(mode=mode, quadrature=quadrature, x_max=x_max, step=step)

    @property
    def grid(self) -> np.ndarray:
        count = int(round(2 * self.x_max / self.step))
        return -self.x_max + self.step * np.arange(count + 1)


def _quarter_turn(rho: np.ndarray) -> np.ndarray:
    """R rho R^dag with R = exp(-i pi/2 n), so that X measured on the result is P on rho."""
    phase = (-1j) ** np.arange(rho.shape[0])
    return phase[:, None] * rho * phase.conj()[None, :]


def _as_density(state: Union[FockVector, np.ndarray], mode: int) -> np.ndarray:
    if isinstance(state, FockVector):
        return reduced_density_matrix(state, mode)
    return np.asarray(state)


def quadrature_distribution(state: Union[FockVector, np.ndarray], sampler: QuadratureSampler) -> Tuple[np.ndarray, np.ndarray]:
    """(grid, pdf) of the sampler's quadrature; raises when the grid misses more than MASS_TOL of the mass."""
    rho = _as_density(state, sampler.mode)
    if sampler.quadrature == "p":
        rho = _quarter_turn(rho)
    grid = sampler.grid
    phi = hermite_functions(rho.shape[0] - 1, grid)
    pdf = np.einsum("mx,mn,nx->x", phi, rho, phi).real
    pdf = np.clip(pdf, 0.0, None)
    mass = pdf.sum() * sampler.step
    trace = float(np.trace(rho).real)
    if abs(mass - trace) > MASS_TOL:
        raise GridUnderflowError(
            f"grid +-{sampler.x_max} holds mass {mass:.8f} of {trace:.8f}; widen the grid or raise M"
        )
    return grid, pdf / mass


def truncated_moments(grid: np.ndarray, pdf: np.ndarray, step: float, M: float) -> Tuple[float, float, float]:
    """(E[x 1{|x|<=M}], E[x^2 1{|x|<=M}], P(|x|<=M)) on the grid."""
    kept = np.abs(grid) <= M
    weights = pdf * step
    return (
        float((grid * weights)[kept].sum()),
        float((grid * grid * weights)[kept].sum()),
        float(weights[kept].sum()),
    )


def _draw(grid: np.ndarray, pdf: np.ndarray, step: float, rng: np.random.Generator, size: int) -> np.ndarray:
    edges = np.append(grid - step / 2, grid[-1] + step / 2)
    cdf = np.concatenate([[0.0], np.cumsum(pdf * step)])
    cdf /= cdf[-1]
    return np.interp(rng.uniform(size=size), cdf, edges)


def sample_quadrature(
    state: Union[FockVector, np.ndarray],
    sampler: QuadratureSampler,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> Union[float, np.ndarray]:
    """Inverse-CDF draw(s) from |psi(x)|^2; P is sampled as X after a quarter-period number rotation."""
    grid, pdf = quadrature_distribution(state, sampler)
    draws = _draw(grid, pdf, sampler.step, rng, 1 if size is None else size)
    return float(draws[0]) if size is None else draws


# ============================================================================
# Truncated estimator
# ============================================================================

@dataclass
class TimeLedger:
    """Coherent evolution time and cycle counts; every (prepare, evolve, measure) cycle is one experiment."""
    evolution_time: float = 0.0
    experiments: int = 0
    shots: int = 0
    batches: int = 0

    def charge(self, cycles: int, t: float, samples_per_cycle: int = 1) -> float:
        spent = cycles * t
        self.evolution_time += spent
        self.experiments += cycles
        self.shots += cycles * samples_per_cycle
        self.batches += 1
        return spent


def _uses_exact_draws(sampling: ShotSampling, L: int, exact_shot_limit: int) -> bool:
    return sampling == "exact" or (sampling == "auto" and L <= exact_shot_limit)


def discarding_mean(samples: np.ndarray, M: float) -> float:
    """(1/L) sum_k x_k 1{|x_k|<=M}; discarded samples count as zero."""
    kept = np.abs(samples) <= M
    if not kept.any():
        raise SignalError(f"all {samples.size} samples discarded at M = {M}")
    return float(np.where(kept, samples, 0.0).sum() / samples.size)


def truncated_mean(
    grid: np.ndarray,
    pdf: np.ndarray,
    step: float,
    M: float,
    L: int,
    rng: np.random.Generator,
    sampling: ShotSampling = "exact",
    exact_shot_limit: int = 200_000,
) -> float:
    """(1/L) sum_k x_k 1{|x_k|<=M} over L shots, drawn exactly or from its normal limit."""
    mean, second, kept_probability = truncated_moments(grid, pdf, step, M)
    if kept_probability <= 0:
        raise SignalError(f"every sample exceeds M = {M}; the threshold is pathologically small")
    if _uses_exact_draws(sampling, L, exact_shot_limit):
        return discarding_mean(_draw(grid, pdf, step, rng, L), M)
    variance = max(second - mean * mean, 0.0)
    return float(rng.normal(mean, math.sqrt(variance / L)))


def estimate_truncated_b(
    state_factory: Callable[[], Union[FockVector, np.ndarray]],
    M: float,
    L: int,
    rng: np.random.Generator,
    ledger: Optional[TimeLedger] = None,
    t: float = 0.0,
    mode: int = 0,
    sampling: ShotSampling = "exact",
    exact_shot_limit: int = 200_000,
    grid_step: float = 0.01,
) -> complex:
    """Zbar = (xbar + i pbar)/sqrt(2) from L shots per quadrature with samples beyond M discarded.

    Each of the 2L shots is one (prepare, evolve, measure) cycle of duration t,
    charged to `ledger` when one is given.
    """
    if M <= 0 or L < 1:
        raise SignalError(f"need M > 0 and L >= 1, got M = {M}, L = {L}")
    rho = _as_density(state_factory(), mode)
    cutoff = rho.shape[0] - 1
    means = {}
    for quadrature in ("x", "p"):
        sampler = QuadratureSampler.for_threshold(0, quadrature, M, cutoff, grid_step)
        if _uses_exact_draws(sampling, L, exact_shot_limit):
            means[quadrature] = discarding_mean(sample_quadrature(rho, sampler, rng, size=L), M)
        else:
            grid, pdf = quadrature_distribution(rho, sampler)
            means[quadrature] = truncated_mean(grid, pdf, sampler.step, M, L, rng, "clt")
        if ledger is not None:
            ledger.charge(L, t)
    return complex(means["x"], means["p"]) / math.sqrt(2)


def estimate_shared(
    densities: Dict[int, np.ndarray],
    M: float,
    L: int,
    rng: np.random.Generator,
    ledger: Optional[TimeLedger] = None,
    t: float = 0.0,
    sampling: ShotSampling = "exact",
    exact_shot_limit: int = 200_000,
    grid_step: float = 0.01,
) -> Dict[int, complex]:
    """Zbar for every measured mode from one batch: each cycle homodynes all modes in the same quadrature."""
    estimates = {
        mode: estimate_truncated_b(
            lambda density=rho: density,
            M,
            L,
            rng,
            sampling=sampling,
            exact_shot_limit=exact_shot_limit,
            grid_step=grid_step,
        )
        for mode, rho in densities.items()
    }
    if ledger is not None:
        for _ in ("x", "p"):
            ledger.charge(L, t, samples_per_cycle=len(densities))
    return estimates


# ============================================================================
# Phase signals
# ============================================================================

@dataclass(frozen=True)
class PhaseSignal:
    value: complex
    t: float = 0.0
    shots: int = 0
    delta: float = 1.0
    ledger_time: float = 0.0
    clamped: int = 0

    def __post_init__(self) -> None:
        magnitude = abs(self.value)
        if magnitude == 0 or not math.isfinite(magnitude):
            raise ZeroSignalError(f"cannot normalize signal value {self.value}")
        object.__setattr__(self, "value", self.value / magnitude)

    def conjugate(self) -> "PhaseSignal":
        return replace(self, value=self.value.conjugate())


def closed_form_b(alpha: complex, omega: float, xi: float, t: float) -> complex:
    """<b> for a coherent state under omega n + (xi/2) n(n-1)."""
    a2 = abs(alpha) ** 2
    return alpha * cmath.exp(-a2) * cmath.exp(-1j * omega * t) * cmath.exp(a2 * cmath.exp(-1j * xi * t))


def signal_for_omega(zbar: complex, t: float = 0.0, shots: int = 0, delta: float = 1.0, ledger_time: float = 0.0) -> PhaseSignal:
    """Z = Zbar/|Zbar|, close to exp(-i(omega t + |alpha|^2 sin(xi t)))."""
    if zbar == 0:
        raise ZeroSignalError("Zbar = 0; resample with more shots")
    return PhaseSignal(zbar, t, shots, delta, ledger_time)


def signal_for_xi(
    z1: complex,
    z2: complex,
    alpha1: float,
    alpha2: float,
    t: float = 0.0,
    shots: int = 0,
    delta: float = 1.0,
    ledger_time: float = 0.0,
) -> PhaseSignal:
    """(c + i s)/|c + i s| close to exp(i xi t), from the amplitude decay and the phase ratio of two coherent inputs.

    beta = alpha2^2 - alpha1^2 is signed on purpose: Im of the normalized ratio
    z1/z2 is sin(beta sin(xi t)) with that sign, so either amplitude ordering
    recovers sin(xi t). Taking |beta| would flip the sign when alpha1 > alpha2.
    """
    if z1 == 0 or z2 == 0:
        raise ZeroSignalError("an averaged amplitude vanished; resample with more shots")
    a1 = alpha1 * alpha1
    beta = alpha2 * alpha2 - alpha1 * alpha1
    cosine = math.log(abs(z1) / alpha1) / a1 + 1.0
    ratio = z1 / z2
    argument = (ratio / abs(ratio)).imag
    clamped = 0
    if abs(argument) > 1.0:
        logger.warning(f"arcsin argument {argument:.6f} clamped to +-1")
        argument = max(-1.0, min(1.0, argument))
        clamped = 1
    sine = math.asin(argument) / beta
    combined = complex(cosine, sine)
    if combined == 0:
        raise ZeroSignalError("reconstructed cos/sin pair vanished")
    return PhaseSignal(combined, t, shots, delta, ledger_time, clamped)
