"""
Truncated multi-mode Fock space.

Basis states |n_0 n_1 ... n_{N-1}> with 0 <= n_i <= cutoff are indexed row-major
with mode 0 most significant, which is numpy's C order for a tensor of shape
(cutoff+1,)*N. States are dense; operators act matrix-free on the reshaped
tensor or are embedded as scipy sparse matrices.
"""
from dataclasses import dataclass
from functools import reduce
from typing import Literal, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from app.services.base import (
    DEFAULT_LEAK_TOL,
    ConfigError,
    NormalizationError,
    TruncationError,
)


OperatorKind = Literal["annihilate", "create", "number", "x", "p"]
SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class FockVector:
    num_modes: int
    cutoff: int
    amplitudes: np.ndarray
    leakage: float = 0.0

    def __post_init__(self) -> None:
        expected = (self.cutoff + 1) ** self.num_modes
        if self.amplitudes.shape != (expected,):
            raise ConfigError(
                f"amplitude vector of shape {self.amplitudes.shape} does not match "
                f"{self.num_modes} modes at cutoff {self.cutoff} (dimension {expected})"
            )

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.cutoff + 1,) * self.num_modes

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.shape)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def evolved(self, amplitudes: np.ndarray, extra_leakage: float = 0.0) -> "FockVector":
        """New state on the same space carrying forward the leakage ledger."""
        return FockVector(self.num_modes, self.cutoff, amplitudes, self.leakage + extra_leakage)


@dataclass(frozen=True)
class ModeOperator:
    kind: OperatorKind
    mode: int = 0

    def local_matrix(self, cutoff: int) -> np.ndarray:
        return local_operator(self.kind, cutoff)


OperatorProduct = Sequence[ModeOperator]
Observable = Union[ModeOperator, OperatorProduct, np.ndarray, sp.spmatrix]


# ============================================================================
# Index bijection
# ============================================================================

def to_index(occupations: Sequence[int], cutoff: int) -> int:
    if any(n < 0 or n > cutoff for n in occupations):
        raise ConfigError(f"occupations {tuple(occupations)} outside 0..{cutoff}")
    return int(np.ravel_multi_index(tuple(occupations), (cutoff + 1,) * len(occupations)))


def to_occupations(index: int, num_modes: int, cutoff: int) -> Tuple[int, ...]:
    return tuple(int(n) for n in np.unravel_index(index, (cutoff + 1,) * num_modes))


# ============================================================================
# Single-mode operators
# ============================================================================

def local_operator(kind: OperatorKind, cutoff: int) -> np.ndarray:
    """Matrix of a single-mode operator on span{|0>, ..., |cutoff>}; b^dag|cutoff> = 0."""
    b = np.diag(np.sqrt(np.arange(1, cutoff + 1, dtype=float)), k=1).astype(complex)
    if kind == "annihilate":
        return b
    if kind == "create":
        return b.conj().T
    if kind == "number":
        return np.diag(np.arange(cutoff + 1, dtype=float)).astype(complex)
    if kind == "x":
        return (b + b.conj().T) / SQRT2
    if kind == "p":
        return 1j * (b.conj().T - b) / SQRT2
    raise ConfigError(f"unknown operator kind: {kind}")


def embed(local: Union[np.ndarray, sp.spmatrix], mode: int, num_modes: int, cutoff: int) -> sp.csr_matrix:
    """Sparse matrix of `local` acting on `mode`, identity elsewhere."""
    _check_mode(mode, num_modes)
    d = cutoff + 1
    left = sp.identity(d ** mode, format="csr", dtype=complex)
    right = sp.identity(d ** (num_modes - mode - 1), format="csr", dtype=complex)
    return sp.kron(sp.kron(left, sp.csr_matrix(local)), right, format="csr")


def mode_matrix(op: ModeOperator, num_modes: int, cutoff: int) -> sp.csr_matrix:
    return embed(op.local_matrix(cutoff), op.mode, num_modes, cutoff)


def _check_mode(mode: int, num_modes: int) -> None:
    if not 0 <= mode < num_modes:
        raise ConfigError(f"mode {mode} out of range for {num_modes} modes")


# ============================================================================
# States
# ============================================================================

def vacuum(num_modes: int, cutoff: int) -> FockVector:
    return number_state([0] * num_modes, cutoff)


def number_state(occupations: Sequence[int], cutoff: int) -> FockVector:
    amplitudes = np.zeros((cutoff + 1) ** len(occupations), dtype=complex)
    amplitudes[to_index(occupations, cutoff)] = 1.0
    return FockVector(len(occupations), cutoff, amplitudes)


def coherent_amplitudes(alpha: complex, cutoff: int) -> Tuple[np.ndarray, float]:
    """Renormalized coherent-state amplitudes e^{-|a|^2/2} a^k/sqrt(k!) and the probability lost to truncation."""
    alpha = complex(alpha)
    if not np.isfinite(alpha.real) or not np.isfinite(alpha.imag):
        raise ConfigError(f"non-finite coherent amplitude: {alpha}")
    if abs(alpha) ** 2 > cutoff / 4:
        raise TruncationError(
            f"cutoff {cutoff} too small for |alpha|^2 = {abs(alpha) ** 2:.4f}; need |alpha|^2 <= cutoff/4"
        )
    amplitudes = np.empty(cutoff + 1, dtype=complex)
    amplitudes[0] = np.exp(-abs(alpha) ** 2 / 2)
    for k in range(1, cutoff + 1):
        amplitudes[k] = amplitudes[k - 1] * alpha / np.sqrt(k)
    kept = float(np.vdot(amplitudes, amplitudes).real)
    return amplitudes / np.sqrt(kept), max(0.0, 1.0 - kept)


def product_state(single_mode: Sequence[np.ndarray], cutoff: int, leakage: float = 0.0) -> FockVector:
    """Tensor product of single-mode amplitude vectors, mode 0 first."""
    amplitudes = reduce(np.kron, single_mode)
    return FockVector(len(single_mode), cutoff, np.asarray(amplitudes, dtype=complex), leakage)


def coherent_product(alphas: Sequence[complex], cutoff: int) -> FockVector:
    vectors = []
    kept = 1.0
    for alpha in alphas:
        vector, leak = coherent_amplitudes(alpha, cutoff)
        vectors.append(vector)
        kept *= 1.0 - leak
    return product_state(vectors, cutoff, 1.0 - kept)


def coherent_state(alpha: complex, num_modes: int, mode: int, cutoff: int) -> FockVector:
    """Coherent state |alpha> on `mode`, vacuum on every other mode."""
    _check_mode(mode, num_modes)
    alphas = [0.0j] * num_modes
    alphas[mode] = alpha
    return coherent_product(alphas, cutoff)


# ============================================================================
# Operator action and expectations
# ============================================================================

def apply_local(matrix: np.ndarray, mode: int, state: FockVector) -> FockVector:
    """Apply a (cutoff+1)x(cutoff+1) matrix to one mode of the state tensor."""
    _check_mode(mode, state.num_modes)
    moved = np.tensordot(matrix, state.tensor(), axes=([1], [mode]))
    return state.evolved(np.moveaxis(moved, 0, mode).reshape(-1))


def apply_operator(op: ModeOperator, state: FockVector) -> FockVector:
    """Exact action on the truncated space; no renormalization."""
    return apply_local(op.local_matrix(state.cutoff), op.mode, state)


def _apply_observable(observable: Observable, state: FockVector) -> np.ndarray:
    if isinstance(observable, ModeOperator):
        return apply_operator(observable, state).amplitudes
    if sp.issparse(observable) or isinstance(observable, np.ndarray):
        return np.asarray(observable @ state.amplitudes).reshape(-1)
    # operator product: rightmost factor acts first
    result = state
    for op in reversed(list(observable)):
        result = apply_operator(op, result)
    return result.amplitudes


def check_normalized(state: FockVector, leak_tol: float = DEFAULT_LEAK_TOL) -> None:
    drift = abs(1.0 - state.norm() ** 2)
    if drift > leak_tol:
        raise NormalizationError(f"state norm^2 deviates from 1 by {drift:.3g} (tolerance {leak_tol:.3g})")


def expectation(observable: Observable, state: FockVector, leak_tol: float = DEFAULT_LEAK_TOL) -> complex:
    """<psi|O|psi> for a mode operator, an operator product or a matrix."""
    check_normalized(state, leak_tol)
    return complex(np.vdot(state.amplitudes, _apply_observable(observable, state)))


def inner(a: FockVector, b: FockVector) -> complex:
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def fidelity(a: FockVector, b: FockVector) -> float:
    return abs(inner(a, b)) ** 2


def reduced_density_matrix(state: FockVector, mode: int) -> np.ndarray:
    """Single-mode marginal rho_mode = Tr_{others} |psi><psi|."""
    _check_mode(mode, state.num_modes)
    flat = np.moveaxis(state.tensor(), mode, 0).reshape(state.cutoff + 1, -1)
    return flat @ flat.conj().T


def boundary_population(state: FockVector) -> float:
    """Probability that some mode sits at occupation = cutoff."""
    probabilities = np.abs(state.tensor()) ** 2
    interior = probabilities[(slice(0, state.cutoff),) * state.num_modes].sum()
    return float(probabilities.sum() - interior)


def check_truncation(state: FockVector, leak_tol: float = DEFAULT_LEAK_TOL) -> float:
    """Total leakage (renormalization loss plus norm drift); raises above leak_tol."""
    total = state.leakage + abs(1.0 - state.norm() ** 2)
    if total > leak_tol:
        raise TruncationError(
            f"truncation leakage {total:.3g} exceeds leak_tol {leak_tol:.3g}; increase the cutoff"
        )
    return total
