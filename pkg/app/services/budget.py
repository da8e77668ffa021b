"""
Signal budgets for the homodyne-derived phase signals.

Each budget fixes the truncation threshold M, the simulation error eta0 and the
statistical error eta1 so that the normalized signal stays within the RFE
tolerance 2*arcsin(eta/2) + C_f <= pi/3, and converts a failure probability
delta into a shot count by Hoeffding's inequality.
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

from app.services.base import ConstraintError


PI_OVER_3 = math.pi / 3
PI_OVER_2 = math.pi / 2


@dataclass(frozen=True)
class SignalBudget:
    kind: str
    M: float
    M_min: float
    eta0: float
    eta1: float
    eta0_max: float
    hoeffding_numerator: float

    def shots_for_delta(self, delta: float) -> int:
        """Shots per quadrature so that the sample means deviate by more than eta1 w.p. <= delta."""
        if not 0 < delta <= 1:
            raise ConstraintError(f"failure probability must lie in (0, 1], got {delta}")
        return max(1, math.ceil(2 * self.M ** 2 / self.eta1 ** 2 * math.log(self.hoeffding_numerator / delta)))


def omega_slack_scale(alpha: float) -> float:
    """|a| e^{-2|a|^2} sin(pi/6 - |a|^2/2)."""
    a2 = alpha * alpha
    return abs(alpha) * math.exp(-2 * a2) * math.sin(math.pi / 6 - a2 / 2)


def omega_m_lower_bound(alpha: float) -> float:
    a2 = alpha * alpha
    return (2 * a2 + 1) / omega_slack_scale(alpha)


def check_amplitude(alpha: float, name: str = "alpha") -> None:
    if not math.isfinite(alpha) or alpha <= 0:
        raise ConstraintError(f"{name} must be a positive finite amplitude, got {alpha}")
    if alpha * alpha >= PI_OVER_3:
        raise ConstraintError(
            f"|{name}|^2 = {alpha * alpha:.4f} must be below pi/3 = {PI_OVER_3:.4f}; "
            f"choose {name} < {math.sqrt(PI_OVER_3):.4f}"
        )


def _resolve(
    kind: str,
    M: Optional[float],
    M_min: float,
    slack_at: Callable[[float], float],
    eta0: Optional[float],
    eta1: Optional[float],
    m_margin: float,
    eta0_fraction: float,
    hoeffding_numerator: float,
) -> SignalBudget:
    if M is None:
        M = float(math.ceil(M_min * m_margin))
    if M <= M_min:
        raise ConstraintError(
            f"{kind}: threshold M = {M} must exceed its lower bound {M_min:.4f}; "
            f"set M >= {math.ceil(M_min * 1.01)} or leave it unset"
        )
    slack = slack_at(M)
    eta0_max = slack / M
    if eta0 is None:
        eta0 = eta0_fraction * eta0_max
    if not 0 <= eta0 < eta0_max:
        raise ConstraintError(
            f"{kind}: eta0 = {eta0} must lie in [0, {eta0_max:.4g}) for M = {M}"
        )
    eta1_max = slack - M * eta0
    if eta1 is None:
        eta1 = eta1_max
    if not 0 < eta1 <= eta1_max * (1 + 1e-12):
        raise ConstraintError(
            f"{kind}: eta1 = {eta1} must lie in (0, {eta1_max:.4g}] for M = {M}, eta0 = {eta0}"
        )
    return SignalBudget(
        kind=kind,
        M=M,
        M_min=M_min,
        eta0=eta0,
        eta1=eta1,
        eta0_max=eta0_max,
        hoeffding_numerator=hoeffding_numerator,
    )


def omega_budget(
    alpha: float,
    M: Optional[float] = None,
    eta0: Optional[float] = None,
    eta1: Optional[float] = None,
    m_margin: float = 1.5,
    eta0_fraction: float = 0.1,
) -> SignalBudget:
    """Budget for the frequency signal Z = Zbar/|Zbar| from a single coherent amplitude."""
    check_amplitude(alpha)
    scale = omega_slack_scale(alpha)
    a2 = alpha * alpha

    def slack_at(m: float) -> float:
        return scale - (2 * a2 + 1) / m

    return _resolve(
        "omega", M, omega_m_lower_bound(alpha), slack_at, eta0, eta1, m_margin, eta0_fraction, 4.0
    )


def xi_coefficients(alpha1: float, alpha2: float) -> Tuple[float, float]:
    """Error amplification factors (A, B) of the cos/sin reconstruction for amplitudes alpha1, alpha2."""
    beta = abs(alpha1 * alpha1 - alpha2 * alpha2)
    a = (4 * math.log(2) * abs(alpha1) ** -3 + 16 / beta / abs(alpha1)) * math.exp(2 * alpha1 * alpha1)
    b = 16 / beta / abs(alpha2) * math.exp(2 * alpha2 * alpha2)
    return a, b


def xi_m_lower_bound(alpha1: float, alpha2: float) -> float:
    a, b = xi_coefficients(alpha1, alpha2)
    return a * (2 * alpha1 * alpha1 + 1) + b * (2 * alpha2 * alpha2 + 1)


def check_xi_amplitudes(alpha1: float, alpha2: float) -> float:
    check_amplitude(alpha1, "alpha1")
    check_amplitude(alpha2, "alpha2")
    beta = abs(alpha1 * alpha1 - alpha2 * alpha2)
    if beta == 0:
        raise ConstraintError("alpha1 and alpha2 must have different magnitudes")
    if beta >= PI_OVER_2:
        raise ConstraintError(f"beta = ||alpha1|^2 - |alpha2|^2| = {beta:.4f} must be below pi/2")
    return beta


def xi_budget(
    alpha1: float,
    alpha2: float,
    M: Optional[float] = None,
    eta0: Optional[float] = None,
    eta1: Optional[float] = None,
    m_margin: float = 1.5,
    eta0_fraction: float = 0.1,
) -> SignalBudget:
    """Budget for the anharmonicity signal reconstructed from two coherent amplitudes."""
    check_xi_amplitudes(alpha1, alpha2)
    a, b = xi_coefficients(alpha1, alpha2)
    c1 = 2 * alpha1 * alpha1 + 1
    c2 = 2 * alpha2 * alpha2 + 1

    def slack_at(m: float) -> float:
        return (m - a * c1 - b * c2) / (m * (a + b))

    return _resolve(
        "xi",
        M,
        xi_m_lower_bound(alpha1, alpha2),
        slack_at,
        eta0,
        eta1,
        m_margin,
        eta0_fraction,
        8.0,
    )


def truncation_bias_bound(alpha: float, M: float) -> float:
    """Upper bound on |<X> - <X 1{|X|<=M}>| for a coherent state evolved by a number-conserving Hamiltonian."""
    return (2 * alpha * alpha + 1) / M
