import hashlib
import json
import zlib
from typing import Any, Mapping, Tuple, Union

import numpy as np


DEFAULT_LEAK_TOL = 1e-8
HERMITICITY_TOL = 1e-12
DENSE_DIM_LIMIT = 4096
SERIES_TOL = 1e-10

StreamPart = Union[int, str]


class HamiltonianLearningError(Exception):
    """Base class for every error raised by the library."""


class ConfigError(HamiltonianLearningError, ValueError):
    """Malformed or inconsistent configuration."""


class ConstraintError(HamiltonianLearningError, ValueError):
    """A signal-budget constraint (amplitude, threshold, error budget) is violated."""


class TruncationError(HamiltonianLearningError):
    """Truncated-space leakage exceeded the configured tolerance."""


class NormalizationError(HamiltonianLearningError):
    """State is not normalized within tolerance."""


class HermiticityError(HamiltonianLearningError):
    """Operator expected to be Hermitian is not."""


class ColoringError(HamiltonianLearningError):
    """Link-graph coloring is missing or violates the distance-2 rule."""


class SignalError(HamiltonianLearningError):
    """A measured signal could not be formed (zero signal, all samples discarded, grid underflow)."""


class ZeroSignalError(SignalError):
    """Averaged signal vanished; the caller may resample once with more shots."""


class GridUnderflowError(SignalError):
    """Quadrature mass escaped the position grid."""


class MergeConflictError(HamiltonianLearningError):
    """Two experiment rounds produced the same parameter."""


class ProtocolError(HamiltonianLearningError):
    """Protocol invoked on an unsupported model or out of order."""


VALIDATION_ERRORS: Tuple[type, ...] = (ConfigError, ConstraintError)


def stream_key(*parts: StreamPart) -> Tuple[int, ...]:
    """Map stream labels to the integer spawn key used by SeedSequence."""
    key = []
    for part in parts:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        else:
            key.append(int(part))
    return tuple(key)


def make_rng(seed: int, *parts: StreamPart) -> np.random.Generator:
    """Independent generator for the stream named by `parts` under the master seed."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=stream_key(*parts))
    return np.random.default_rng(sequence)


def config_hash(payload: Mapping[str, Any]) -> str:
    """Stable short hash of a JSON-serializable config payload."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
