"""
Time evolution on the truncated space.

Exact evolution, randomized-unitary insertion (phase shifters and two-mode
rotations), analytic and numeric effective Hamiltonians, SPAM channels and the
ensemble-deviation scan used to check the O(1/r) convergence of randomized
dynamics to its effective generator.
"""
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from app.schemas import LatticeModel, SpamKind
from app.services.base import (
    DEFAULT_LEAK_TOL,
    DENSE_DIM_LIMIT,
    ConfigError,
    NormalizationError,
    TruncationError,
    make_rng,
)
from app.services.fock import FockVector, apply_local, local_operator
from app.services.lattice import build_hamiltonian, check_hermitian


logger = logging.getLogger(__name__)

RotationKind = Literal["x", "y"]
UNITARITY_TOL = 1e-10
DEGENERACY_TOL = 1e-6


# ============================================================================
# Exact evolution
# ============================================================================

class Propagator:
    """e^{-iHt} for a fixed H; spectral below DENSE_DIM_LIMIT, series (expm_multiply) above."""

    def __init__(self, hamiltonian, leak_tol: float = DEFAULT_LEAK_TOL):
        check_hermitian(hamiltonian)
        self.hamiltonian = sp.csr_matrix(hamiltonian)
        self.dim = self.hamiltonian.shape[0]
        self.leak_tol = leak_tol
        self.dense = self.dim <= DENSE_DIM_LIMIT
        if self.dense:
            self.energies, self.basis = scipy.linalg.eigh(self.hamiltonian.toarray())

    def apply(self, amplitudes: np.ndarray, t: float) -> np.ndarray:
        if t == 0:
            return amplitudes.copy()
        if self.dense:
            return self.basis @ (np.exp(-1j * self.energies * t) * (self.basis.conj().T @ amplitudes))
        return expm_multiply(-1j * t * self.hamiltonian, amplitudes)

    def unitary(self, t: float) -> np.ndarray:
        if not self.dense:
            raise ConfigError(f"dense propagator requested for dimension {self.dim}")
        return (self.basis * np.exp(-1j * self.energies * t)) @ self.basis.conj().T

    def evolve(self, state: FockVector, t: float) -> FockVector:
        if t < 0:
            raise ConfigError(f"evolution time must be non-negative, got {t}")
        before = state.norm() ** 2
        amplitudes = self.apply(state.amplitudes, t)
        drift = abs(float(np.vdot(amplitudes, amplitudes).real) - before)
        if drift > self.leak_tol:
            raise TruncationError(f"norm drift {drift:.3g} over leak_tol {self.leak_tol:.3g} after t = {t}")
        return state.evolved(amplitudes, drift)


HamiltonianLike = Union[Propagator, sp.spmatrix, np.ndarray]


def as_propagator(hamiltonian: HamiltonianLike, leak_tol: float = DEFAULT_LEAK_TOL) -> Propagator:
    if isinstance(hamiltonian, Propagator):
        return hamiltonian
    return Propagator(hamiltonian, leak_tol)


def evolve_exact(hamiltonian: HamiltonianLike, state: FockVector, t: float, leak_tol: float = DEFAULT_LEAK_TOL) -> FockVector:
    return as_propagator(hamiltonian, leak_tol).evolve(state, t)


# ============================================================================
# Two-mode rotations
# ============================================================================

@lru_cache(maxsize=32)
def rotation_generator(kind: RotationKind, cutoff: int) -> np.ndarray:
    """Hermitian G with U_kind(theta) = exp(i theta G) on a pair of modes (first mode is b_1)."""
    hop = np.kron(local_operator("create", cutoff), local_operator("annihilate", cutoff))
    if kind == "x":
        return hop + hop.conj().T
    if kind == "y":
        return -1j * (hop - hop.conj().T)
    raise ConfigError(f"unknown rotation kind: {kind}")


@lru_cache(maxsize=32)
def _generator_spectrum(kind: RotationKind, cutoff: int) -> Tuple[np.ndarray, np.ndarray]:
    return scipy.linalg.eigh(rotation_generator(kind, cutoff))


def two_mode_rotation(kind: RotationKind, theta: float, cutoff: int) -> np.ndarray:
    """U_x(theta) = exp(i theta (b1^dag b2 + b2^dag b1)), U_y(theta) = exp(theta (b1^dag b2 - b2^dag b1))."""
    values, vectors = _generator_spectrum(kind, cutoff)
    unitary = (vectors * np.exp(1j * theta * values)) @ vectors.conj().T
    defect = np.abs(unitary.conj().T @ unitary - np.eye(unitary.shape[0])).max()
    if defect > UNITARITY_TOL:
        raise NormalizationError(f"rotation U_{kind}({theta}) not unitary (defect {defect:.3g})")
    return unitary


def apply_two_mode(matrix: np.ndarray, modes: Tuple[int, int], state: FockVector) -> FockVector:
    """Apply a pair unitary acting on (modes[0], modes[1]) of the state tensor."""
    i, j = modes
    if i == j or not (0 <= i < state.num_modes and 0 <= j < state.num_modes):
        raise ConfigError(f"invalid mode pair {modes} for {state.num_modes} modes")
    d = state.cutoff + 1
    blocks = matrix.reshape(d, d, d, d)
    moved = np.tensordot(blocks, state.tensor(), axes=([2, 3], [i, j]))
    return state.evolved(np.moveaxis(moved, [0, 1], [i, j]).reshape(-1))


# ============================================================================
# Randomized insertion
# ============================================================================

@dataclass(frozen=True)
class PairRotation:
    kind: RotationKind
    modes: Tuple[int, int]


@dataclass(frozen=True)
class RandomizationPlan:
    """r steps of U_j^dag e^{-iH tau} U_j with tau = t/r; angles i.i.d. per step and per target."""
    steps: int
    phase_modes: Tuple[int, ...] = ()
    rotations: Tuple[PairRotation, ...] = ()
    angle_distribution: Literal["uniform", "zero"] = "uniform"
    seed: int = 0
    stream: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"randomization needs at least one step, got {self.steps}")
        targets = list(self.phase_modes) + [m for r in self.rotations for m in r.modes]
        if len(targets) != len(set(targets)):
            raise ConfigError(f"randomization targets overlap: {targets}")

    @property
    def targets(self) -> int:
        return len(self.phase_modes) + len(self.rotations)

    def tau(self, t: float) -> float:
        return t / self.steps

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """(steps, targets) array of theta ~ Uniform[0, 2pi) (zeros for the "zero" distribution)."""
        if self.angle_distribution == "zero":
            return np.zeros((self.steps, self.targets))
        return rng.uniform(0.0, 2 * np.pi, size=(self.steps, self.targets))

    def check_modes(self, num_modes: int) -> None:
        for m in list(self.phase_modes) + [m for r in self.rotations for m in r.modes]:
            if not 0 <= m < num_modes:
                raise ConfigError(f"plan targets mode {m} but the model has {num_modes} modes")


def _insert(state: FockVector, plan: RandomizationPlan, angles: np.ndarray) -> FockVector:
    """Apply exp(-i theta n_m) on phase modes and U_kind(theta/2) on rotated pairs."""
    occupations = np.arange(state.cutoff + 1)
    for mode, theta in zip(plan.phase_modes, angles[: len(plan.phase_modes)]):
        if theta != 0:
            state = apply_local(np.diag(np.exp(-1j * theta * occupations)), mode, state)
    for rotation, theta in zip(plan.rotations, angles[len(plan.phase_modes):]):
        if theta != 0:
            state = apply_two_mode(two_mode_rotation(rotation.kind, theta / 2, state.cutoff), rotation.modes, state)
    return state


def evolve_randomized(
    hamiltonian: HamiltonianLike,
    state: FockVector,
    t: float,
    plan: RandomizationPlan,
    rng: Optional[np.random.Generator] = None,
    leak_tol: float = DEFAULT_LEAK_TOL,
) -> FockVector:
    """One trajectory of prod_j U_j^dag e^{-iH tau} U_j |psi>, adjacent insertions merged into U_{j+1} U_j^dag."""
    plan.check_modes(state.num_modes)
    propagator = as_propagator(hamiltonian, leak_tol)
    if propagator.dim != state.dim:
        raise ConfigError(f"Hamiltonian dimension {propagator.dim} does not match state dimension {state.dim}")
    rng = rng if rng is not None else make_rng(plan.seed, *plan.stream)
    angles = plan.draw(rng)
    tau = plan.tau(t)
    previous = np.zeros(plan.targets)
    for step in range(plan.steps):
        state = _insert(state, plan, angles[step] - previous)
        state = propagator.evolve(state, tau)
        previous = angles[step]
    return _insert(state, plan, -previous)


# ============================================================================
# Effective Hamiltonians
# ============================================================================

def effective_hamiltonian(model: LatticeModel, randomized_modes: Sequence[int]) -> LatticeModel:
    """Phase averaging over the given modes drops every coupling touching them."""
    randomized = set(randomized_modes)
    return model.restricted_to([e for e in model.edges if not randomized & set(e)])


def numeric_phase_average(
    hamiltonian,
    num_modes: int,
    cutoff: int,
    modes: Sequence[int],
    points: Optional[int] = None,
) -> np.ndarray:
    """Average of e^{i theta n_m} H e^{-i theta n_m} over a uniform theta grid, mode by mode."""
    points = points or 2 * cutoff + 1
    matrix = hamiltonian.toarray() if sp.issparse(hamiltonian) else np.asarray(hamiltonian)
    shape = (cutoff + 1,) * num_modes
    occupations = np.indices(shape).reshape(num_modes, -1)
    for mode in modes:
        n = occupations[mode]
        averaged = np.zeros(matrix.shape, dtype=complex)
        for theta in 2 * np.pi * np.arange(points) / points:
            phase = np.exp(-1j * theta * n)
            averaged += (phase.conj()[:, None] * matrix) * phase[None, :]
        matrix = averaged / points
    return matrix


def pinch(hamiltonian, generator: np.ndarray, tol: float = DEGENERACY_TOL) -> np.ndarray:
    """Block-diagonal part of H in the eigenbasis of `generator` (the rotation-averaged generator)."""
    matrix = hamiltonian.toarray() if sp.issparse(hamiltonian) else np.asarray(hamiltonian)
    values, vectors = scipy.linalg.eigh(generator)
    rotated = vectors.conj().T @ matrix @ vectors
    rotated[np.abs(values[:, None] - values[None, :]) > tol] = 0.0
    return vectors @ rotated @ vectors.conj().T


def rotated_frame_hamiltonian(pair_model: LatticeModel, kind: RotationKind, cutoff: int) -> np.ndarray:
    """Effective two-mode generator under i.i.d. U_kind insertions (r -> infinity)."""
    if pair_model.num_modes != 2:
        raise ConfigError(f"rotated frame needs a 2-mode cluster, got {pair_model.num_modes} modes")
    return pinch(build_hamiltonian(pair_model, cutoff), rotation_generator(kind, cutoff))


# ============================================================================
# SPAM
# ============================================================================

@dataclass(frozen=True)
class SpamChannel:
    """Identity with probability 1 - strength, a random kick otherwise."""
    strength: float = 0.0
    stage: Literal["prep", "measure"] = "prep"
    kind: SpamKind = "displacement"
    kick_scale: float = 0.1

    def __post_init__(self) -> None:
        if not 0 <= self.strength < 1:
            raise ConfigError(f"SPAM strength must lie in [0, 1), got {self.strength}")


def displacement_matrix(beta: complex, cutoff: int) -> np.ndarray:
    b = local_operator("annihilate", cutoff)
    return scipy.linalg.expm(beta * b.conj().T - np.conj(beta) * b)


def _random_beta(channel: SpamChannel, rng: np.random.Generator) -> complex:
    radius = channel.kick_scale * np.sqrt(rng.uniform())
    return complex(radius * np.exp(2j * np.pi * rng.uniform()))


def kick(channel: SpamChannel, state: FockVector, rng: np.random.Generator) -> FockVector:
    """The non-identity branch: displace every mode at random, or replace by vacuum."""
    if channel.kind == "replace":
        amplitudes = np.zeros_like(state.amplitudes)
        amplitudes[0] = 1.0
        return state.evolved(amplitudes)
    for mode in range(state.num_modes):
        state = apply_local(displacement_matrix(_random_beta(channel, rng), state.cutoff), mode, state)
    return state


def apply_spam(channel: SpamChannel, state: FockVector, rng: np.random.Generator) -> FockVector:
    """One stochastic realization of the channel."""
    if channel.strength == 0 or rng.uniform() >= channel.strength:
        return state
    return kick(channel, state, rng)


def spam_mixture(
    channel: SpamChannel,
    state: FockVector,
    rng: np.random.Generator,
    kicks: int,
) -> List[Tuple[float, FockVector]]:
    """Weighted components of the channel output: (1 - p, state) plus p spread over `kicks` kicks."""
    if channel.strength == 0:
        return [(1.0, state)]
    if channel.kind == "replace":
        return [(1.0 - channel.strength, state), (channel.strength, kick(channel, state, rng))]
    weight = channel.strength / kicks
    return [(1.0 - channel.strength, state)] + [(weight, kick(channel, state, rng)) for _ in range(kicks)]


def spam_density(channel: SpamChannel, rho: np.ndarray, rng: np.random.Generator, kicks: int) -> np.ndarray:
    """Single-mode density-matrix form of the channel."""
    if channel.strength == 0:
        return rho
    cutoff = rho.shape[0] - 1
    if channel.kind == "replace":
        vacuum = np.zeros_like(rho)
        vacuum[0, 0] = 1.0
        return (1.0 - channel.strength) * rho + channel.strength * vacuum
    kicked = np.zeros_like(rho)
    for _ in range(kicks):
        d = displacement_matrix(_random_beta(channel, rng), cutoff)
        kicked += d @ rho @ d.conj().T
    return (1.0 - channel.strength) * rho + channel.strength * kicked / kicks


# ============================================================================
# Ensembles and deviation from effective dynamics
# ============================================================================

def density(state: FockVector) -> np.ndarray:
    return np.outer(state.amplitudes, state.amplitudes.conj())


def ensemble_density(states: Sequence[FockVector], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    weights = weights if weights is not None else [1.0 / len(states)] * len(states)
    return sum(w * density(s) for w, s in zip(weights, states))


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    return 0.5 * float(np.abs(scipy.linalg.eigvalsh(rho - sigma)).sum())


def averaged_channel_evolution(
    hamiltonian: HamiltonianLike,
    rho: np.ndarray,
    t: float,
    plan: RandomizationPlan,
    cutoff: int,
    num_modes: int,
) -> np.ndarray:
    """Exact ensemble average of phase-randomized evolution via a (2*cutoff+1)-point theta quadrature per mode."""
    if plan.rotations:
        raise ConfigError("quadrature ensemble supports phase randomization only")
    propagator = as_propagator(hamiltonian)
    step = propagator.unitary(plan.tau(t))
    points = 2 * cutoff + 1
    occupations = np.indices((cutoff + 1,) * num_modes).reshape(num_modes, -1)
    kraus = []
    for thetas in itertools.product(2 * np.pi * np.arange(points) / points, repeat=len(plan.phase_modes)):
        phase = np.ones(step.shape[0], dtype=complex)
        for mode, theta in zip(plan.phase_modes, thetas):
            phase = phase * np.exp(-1j * theta * occupations[mode])
        kraus.append((phase.conj()[:, None] * step) * phase[None, :])
    weight = 1.0 / len(kraus)
    for _ in range(plan.steps):
        rho = weight * sum(k @ rho @ k.conj().T for k in kraus)
    return rho


def monte_carlo_density(
    hamiltonian: HamiltonianLike,
    state: FockVector,
    t: float,
    plan: RandomizationPlan,
    trajectories: int,
) -> np.ndarray:
    """Average of independent trajectories, each on its own counter-based stream."""
    propagator = as_propagator(hamiltonian)
    states = [
        evolve_randomized(propagator, state, t, plan, make_rng(plan.seed, *plan.stream, "trajectory", k))
        for k in range(trajectories)
    ]
    return ensemble_density(states)


def deviation_scan(
    model: LatticeModel,
    cutoff: int,
    t: float,
    steps: Sequence[int],
    randomized_modes: Sequence[int],
    state: FockVector,
    method: Literal["quadrature", "monte_carlo"] = "quadrature",
    trajectories: int = 200,
    seed: int = 0,
) -> List[Tuple[int, float]]:
    """Trace distance between randomized ensemble and effective evolution for each step count r."""
    propagator = Propagator(build_hamiltonian(model, cutoff))
    effective = Propagator(build_hamiltonian(effective_hamiltonian(model, randomized_modes), cutoff))
    target = density(effective.evolve(state, t))
    rho0 = density(state)
    rows = []
    for r in steps:
        plan = RandomizationPlan(steps=r, phase_modes=tuple(randomized_modes), seed=seed, stream=(r,))
        if method == "quadrature":
            rho = averaged_channel_evolution(propagator, rho0, t, plan, cutoff, model.num_modes)
        else:
            rho = monte_carlo_density(propagator, state, t, plan, trajectories)
        distance = trace_distance(rho, target)
        logger.debug(f"r = {r}: trace distance {distance:.3e}")
        rows.append((r, distance))
    return rows
