"""
Robust frequency estimation.

Given a provider of unit-circle signals Z(t) ~ exp(-i(omega t + f(t))) with
bounded phase error, iteratively doubles the evolution time and narrows the
estimate of omega/W~ to the candidate closest (mod 2pi) to the previous one.
"""
import cmath
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from app.services.base import ZeroSignalError
from app.services.homodyne import PhaseSignal


logger = logging.getLogger(__name__)

SignalProvider = Callable[[float, float], PhaseSignal]


def modular_distance(a, b):
    """|a - b|_{2pi}: distance on the circle, in [0, pi]."""
    difference = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 2 * np.pi)
    distance = np.pi - np.abs(difference - np.pi)
    return float(distance) if np.ndim(distance) == 0 else distance


def wrap_to_pi(theta: float) -> float:
    wrapped = math.fmod(theta + math.pi, 2 * math.pi)
    if wrapped < 0:
        wrapped += 2 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class RfeSchedule:
    W: float
    epsilon: float

    @property
    def Wtilde(self) -> float:
        return 3 * self.W / math.pi

    @property
    def J(self) -> int:
        return max(1, math.ceil(math.log2(4 * math.pi * self.Wtilde / (3 * self.epsilon))))

    def times(self) -> List[float]:
        return [2 ** j / self.Wtilde for j in range(self.J)]

    def error_scales(self) -> List[float]:
        """E_0 = 2pi and E_j = 4pi W~/(3 2^j): worst-case error when iteration j fails."""
        return [2 * math.pi] + [4 * math.pi * self.Wtilde / (3 * 2 ** j) for j in range(1, self.J)]

    def deltas(self) -> List[float]:
        """delta_j = (3 eps^2 / 4 E_j^2) 2^j / (2^J - 1), clamped to 1; the closed form for j >= 1."""
        first = 3 * self.epsilon ** 2 / (4 * (2 * math.pi) ** 2) / (2 ** self.J - 1)
        return [min(1.0, first)] + [min(1.0, self.algorithm_delta(j)) for j in range(1, self.J)]

    def algorithm_delta(self, j: int) -> float:
        """Closed form 27 eps^2/(pi^2 W~^2) 2^{3j-6}/(2^J-1); equals deltas()[j] for j >= 1."""
        return 27 * self.epsilon ** 2 / (math.pi ** 2 * self.Wtilde ** 2) * 2.0 ** (3 * j - 6) / (2 ** self.J - 1)

    def failure_budget(self) -> float:
        """sum_j E_j^2 delta_j; at most (3/4) eps^2."""
        return sum(e ** 2 * d for e, d in zip(self.error_scales(), self.deltas()))


@dataclass
class PhaseTrack:
    theta_history: List[float] = field(default_factory=lambda: [0.0])
    candidate_sets: List[np.ndarray] = field(default_factory=list)
    final_theta: Optional[float] = None


@dataclass
class RfeResult:
    estimate: float
    total_time: float
    track: PhaseTrack
    signals: List[PhaseSignal]
    fallbacks: int = 0
    failure_budget: float = 0.0

    @property
    def clamps(self) -> int:
        return sum(s.clamped for s in self.signals)

    @property
    def shots(self) -> int:
        return sum(s.shots for s in self.signals)


def rfe_run(provider: SignalProvider, schedule: RfeSchedule) -> RfeResult:
    """Estimate omega with |omega| < W; never aborts on a bad signal."""
    track = PhaseTrack()
    signals: List[PhaseSignal] = []
    fallbacks = 0
    theta = 0.0
    for j, (t, delta) in enumerate(zip(schedule.times(), schedule.deltas())):
        try:
            signal = provider(t, delta)
        except ZeroSignalError as exc:
            logger.warning(f"RFE iteration {j}: signal unavailable ({exc}); using Z = 1")
            signal = PhaseSignal(1.0 + 0j, t=t, delta=delta)
            fallbacks += 1
        signals.append(signal)
        scale = 2 ** j
        candidates = (2 * np.pi * np.arange(scale) - cmath.phase(signal.value)) / scale
        theta = float(candidates[int(np.argmin(modular_distance(candidates, theta)))])
        track.candidate_sets.append(candidates)
        track.theta_history.append(theta)
        logger.debug(f"RFE iteration {j}: t = {t:.4g}, delta = {delta:.3g}, theta = {theta:.6f}")
    track.final_theta = wrap_to_pi(theta)
    total_time = sum(s.ledger_time for s in signals)
    budget = schedule.failure_budget()
    logger.debug(f"RFE done: J = {schedule.J}, failure budget {budget:.3g} against (3/4) eps^2 = {0.75 * schedule.epsilon ** 2:.3g}")
    return RfeResult(schedule.Wtilde * track.final_theta, total_time, track, signals, fallbacks, budget)


# ============================================================================
# Synthetic providers
# ============================================================================

def noise_free_provider(omega: float) -> SignalProvider:
    def provide(t: float, delta: float) -> PhaseSignal:
        return PhaseSignal(cmath.exp(-1j * omega * t), t=t, shots=1, delta=delta, ledger_time=t)
    return provide


def contract_provider(
    omega: float,
    eta: float,
    c_f: float,
    rng: np.random.Generator,
    adversarial: bool = True,
    cost: float = 1.0,
) -> SignalProvider:
    """Signals meeting the RFE contract at its boundary: phase bias f(t) with |f| <= c_f, error eta, failure w.p. delta.

    The adversarial variant alternates the sign of f between octaves of t and pushes
    the eta error in the same direction; evolution cost is cost * t * (log(1/delta) + 1).
    """
    kick = 2 * math.asin(eta / 2)

    def provide(t: float, delta: float) -> PhaseSignal:
        if adversarial:
            sign = 1.0 if math.floor(math.log2(t) + 1e-9) % 2 == 0 else -1.0
            phase = omega * t + sign * (c_f + kick)
        else:
            phase = omega * t + rng.uniform(-c_f, c_f) + rng.uniform(-kick, kick)
        if rng.uniform() < delta:
            phase = rng.uniform(0, 2 * math.pi)
        return PhaseSignal(
            cmath.exp(-1j * phase),
            t=t,
            shots=1,
            delta=delta,
            ledger_time=cost * t * (math.log(1 / delta) + 1),
        )
    return provide
