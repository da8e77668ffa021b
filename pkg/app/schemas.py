import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services import budget
from app.services.base import DEFAULT_LEAK_TOL


ProtocolName = Literal["auto", "single_mode", "two_mode", "lattice"]
DynamicsMode = Literal["effective", "randomized"]
ShotSampling = Literal["exact", "clt", "auto"]
SpamKind = Literal["displacement", "replace"]
SuiteName = Literal["truncation", "deviation", "hoeffding", "selection_rule", "closed_form", "rfe_contract"]

PARAMETER_BOUND = 1.0
BOUND_SLACK = 1e-12


# ============================================================================
# Lattice model
# ============================================================================

class Coupling(BaseModel):
    """Hopping amplitude h_ij = re + i*im on edge (i, j); h_ji is its conjugate."""
    model_config = ConfigDict(frozen=True)

    i: int = Field(ge=0)
    j: int = Field(ge=0)
    re: float = 0.0
    im: float = 0.0

    @model_validator(mode="after")
    def _no_self_loop(self) -> "Coupling":
        if self.i == self.j:
            raise ValueError(f"self-loop on mode {self.i} is not a coupling")
        return self

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)

    @property
    def edge(self) -> Tuple[int, int]:
        return (self.i, self.j)

    def canonical(self) -> "Coupling":
        """Same coupling stored with i < j."""
        if self.i < self.j:
            return self
        return Coupling(i=self.j, j=self.i, re=self.re, im=-self.im)


class LatticeModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_modes: int = Field(ge=1)
    omega: List[float]
    xi: List[float]
    couplings: List[Coupling] = Field(default_factory=list)

    @field_validator("couplings")
    @classmethod
    def _canonical_couplings(cls, couplings: List[Coupling]) -> List[Coupling]:
        merged: Dict[Tuple[int, int], Coupling] = {}
        for coupling in couplings:
            c = coupling.canonical()
            seen = merged.get(c.edge)
            if seen is not None:
                if abs(seen.value - c.value) > BOUND_SLACK:
                    raise ValueError(
                        f"inconsistent h_ij/h_ji pair on edge {c.edge}: {seen.value} vs {c.value}"
                    )
                continue
            merged[c.edge] = c
        return [merged[edge] for edge in sorted(merged)]

    @model_validator(mode="after")
    def _check_bounds(self) -> "LatticeModel":
        if len(self.omega) != self.num_modes or len(self.xi) != self.num_modes:
            raise ValueError(
                f"omega and xi need {self.num_modes} entries, got {len(self.omega)} and {len(self.xi)}"
            )
        for name, values in (("omega", self.omega), ("xi", self.xi)):
            for index, value in enumerate(values):
                if not math.isfinite(value) or abs(value) > PARAMETER_BOUND + BOUND_SLACK:
                    raise ValueError(f"|{name}_{index}| = {abs(value)} exceeds {PARAMETER_BOUND}")
        for c in self.couplings:
            if c.j >= self.num_modes:
                raise ValueError(f"edge {c.edge} references a mode outside 0..{self.num_modes - 1}")
            if abs(c.value) > PARAMETER_BOUND + BOUND_SLACK:
                raise ValueError(f"|h_{c.i}_{c.j}| = {abs(c.value)} exceeds {PARAMETER_BOUND}")
        return self

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return [c.edge for c in self.couplings]

    @property
    def degree_bound(self) -> int:
        degree = [0] * self.num_modes
        for i, j in self.edges:
            degree[i] += 1
            degree[j] += 1
        return max(degree) if degree else 0

    def hopping(self, i: int, j: int) -> complex:
        """h_ij, with h_ji = conj(h_ij) and zero for absent edges."""
        for c in self.couplings:
            if c.edge == (i, j):
                return c.value
            if c.edge == (j, i):
                return c.value.conjugate()
        return 0.0j

    def restricted_to(self, edges: List[Tuple[int, int]]) -> "LatticeModel":
        """Copy keeping only the couplings on `edges`."""
        keep = {tuple(sorted(e)) for e in edges}
        return self.model_copy(update={"couplings": [c for c in self.couplings if c.edge in keep]})

    def parameters(self) -> Dict[str, float]:
        """Ordered map from parameter name to true value."""
        values: Dict[str, float] = {}
        for index, value in enumerate(self.omega):
            values[f"omega_{index}"] = value
        for index, value in enumerate(self.xi):
            values[f"xi_{index}"] = value
        for c in self.couplings:
            values[f"re_h_{c.i}_{c.j}"] = c.re
            values[f"im_h_{c.i}_{c.j}"] = c.im
        return values


class ModelSpec(BaseModel):
    """Graph and true parameters, given explicitly or drawn at random within the bounds."""
    kind: Literal["explicit", "chain", "grid"] = "explicit"
    num_modes: Optional[int] = Field(default=None, ge=1)
    rows: Optional[int] = Field(default=None, ge=1)
    cols: Optional[int] = Field(default=None, ge=1)
    edges: Optional[List[Tuple[int, int]]] = None
    omega: Optional[List[float]] = None
    xi: Optional[List[float]] = None
    couplings: Optional[List[Coupling]] = None
    hopping: Optional[List[Tuple[float, float]]] = None
    random_parameters: bool = False
    random_seed: Optional[int] = None
    parameter_bound: float = Field(default=1.0, gt=0, le=1.0)

    @model_validator(mode="after")
    def _check_shape(self) -> "ModelSpec":
        if self.kind == "chain" and self.num_modes is None:
            raise ValueError("chain models need num_modes")
        if self.kind == "grid" and (self.rows is None or self.cols is None):
            raise ValueError("grid models need rows and cols")
        if self.kind == "explicit" and self.num_modes is None and self.omega is None:
            raise ValueError("explicit models need num_modes or omega")
        if not self.random_parameters and (self.omega is None or self.xi is None):
            raise ValueError("give omega and xi, or set random_parameters")
        return self


# ============================================================================
# Protocol knobs
# ============================================================================

class ProtocolConfig(BaseModel):
    name: ProtocolName = "auto"
    epsilon: float = Field(default=1e-2, gt=0)

    # Coherent amplitudes (real, positive)
    alpha: float = 0.4
    alpha1: float = 0.5
    alpha2: float = 0.9

    # Truncation thresholds and error budgets; unset values are derived
    M: Optional[float] = None
    M_xi: Optional[float] = None
    eta0: Optional[float] = None
    eta1: Optional[float] = None
    eta0_xi: Optional[float] = None
    eta1_xi: Optional[float] = None
    m_margin: float = Field(default=1.5, gt=1.0)
    eta0_fraction: float = Field(default=0.1, ge=0, lt=1)

    # Frequency priors for RFE (|omega| < W)
    W: float = Field(default=1.05, gt=0)
    W_rotated: float = Field(default=2.05, gt=0)

    # Imperfections
    spam_strength: float = Field(default=0.0, ge=0, lt=1)
    spam_kind: SpamKind = "displacement"
    spam_kicks: int = Field(default=8, ge=1)
    spam_kick_scale: float = Field(default=0.1, gt=0)

    # Simulation fidelity
    cutoff: int = Field(default=12, ge=1)
    leak_tol: float = Field(default=DEFAULT_LEAK_TOL, gt=0)
    dynamics: DynamicsMode = "effective"
    trajectories: int = Field(default=16, ge=1)
    r_initial: int = Field(default=8, ge=1)
    r_max: int = Field(default=4096, ge=1)
    shot_sampling: ShotSampling = "auto"
    exact_shot_limit: int = Field(default=200_000, ge=1)
    grid_step: float = Field(default=0.01, gt=0)
    learn_rotated_anharmonicity: bool = False

    @model_validator(mode="after")
    def _check_constraints(self) -> "ProtocolConfig":
        # budget raises ConstraintError (a ValueError) with an actionable message
        self.omega_budget()
        self.xi_budget()
        largest = max(self.alpha, self.alpha1, self.alpha2)
        if largest * largest > self.cutoff / 4:
            raise ValueError(
                f"cutoff {self.cutoff} too small for |alpha|^2 = {largest * largest:.3f}; "
                f"need cutoff >= {math.ceil(4 * largest * largest)}"
            )
        if self.r_initial > self.r_max:
            raise ValueError(f"r_initial = {self.r_initial} exceeds r_max = {self.r_max}")
        return self

    def omega_budget(self) -> budget.SignalBudget:
        return budget.omega_budget(
            self.alpha, self.M, self.eta0, self.eta1, self.m_margin, self.eta0_fraction
        )

    def xi_budget(self) -> budget.SignalBudget:
        return budget.xi_budget(
            self.alpha1, self.alpha2, self.M_xi, self.eta0_xi, self.eta1_xi, self.m_margin, self.eta0_fraction
        )


# ============================================================================
# Campaign, outputs, verification
# ============================================================================

class CampaignConfig(BaseModel):
    trials: int = Field(default=1, ge=1)
    seed: int = 0
    workers: Optional[int] = Field(default=None, ge=1)
    epsilons: Optional[List[float]] = None
    sql_baseline: bool = True

    @field_validator("epsilons")
    @classmethod
    def _positive(cls, values: Optional[List[float]]) -> Optional[List[float]]:
        if values is not None and any(v <= 0 for v in values):
            raise ValueError("every epsilon must be positive")
        return values


class OutputConfig(BaseModel):
    directory: str = "results"
    formats: List[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])


class VerifyConfig(BaseModel):
    suites: List[SuiteName] = Field(
        default_factory=lambda: ["truncation", "deviation", "hoeffding", "selection_rule"]
    )
    slope_tolerance: float = 0.15

    truncation_alphas: List[float] = Field(default_factory=lambda: [0.3, 0.5, 0.8])
    truncation_thresholds: List[float] = Field(default_factory=lambda: [2.0, 4.0, 8.0])
    truncation_times: List[float] = Field(default_factory=lambda: [0.0, 1.0, 3.0])

    deviation_steps: List[int] = Field(default_factory=lambda: [8, 16, 32, 64, 128])
    deviation_time: float = 1.0
    deviation_cutoff: int = 4
    deviation_method: Literal["quadrature", "monte_carlo"] = "quadrature"
    deviation_trajectories: int = 200

    hoeffding_deltas: List[float] = Field(default_factory=lambda: [0.1, 0.02])
    hoeffding_repetitions: int = 500
    hoeffding_M: float = 4.0
    hoeffding_eta1: float = 0.5
    hoeffding_alpha: float = 0.4
    hoeffding_time: float = 1.0

    selection_instances: int = 5
    selection_cutoff: int = 3
    selection_seed: int = 7

    closed_form_cutoff: int = 24
    closed_form_alphas: List[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6])

    rfe_trials: int = 200
    rfe_epsilons: List[float] = Field(default_factory=lambda: [1e-2, 1e-3])


class ExperimentConfig(BaseModel):
    schema_version: Literal[1] = 1
    model: ModelSpec
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    campaign: CampaignConfig = Field(default_factory=CampaignConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)


# ============================================================================
# Results
# ============================================================================

class ParameterEstimate(BaseModel):
    name: str
    estimate: float
    true_value: Optional[float] = None
    error: Optional[float] = None
    evolution_time: float = 0.0
    shots: int = 0
    experiments: int = 0
    round: str = ""


class EstimationReport(BaseModel):
    protocol: str
    parameters: List[ParameterEstimate]
    total_evolution_time: float
    total_shots: int
    total_experiments: int
    wall_time: float = 0.0
    config_hash: str = ""
    seed: int = 0
    stream: List[int] = Field(default_factory=list)
    cutoff: int = 0
    calibrated_steps: Dict[str, int] = Field(default_factory=dict)
    diagnostics: Dict[str, float] = Field(default_factory=dict)

    def estimates(self) -> Dict[str, float]:
        return {p.name: p.estimate for p in self.parameters}


class TrialRecord(BaseModel):
    trial: int
    parameter: str
    estimate: float
    true_value: Optional[float] = None
    error: Optional[float] = None
    evolution_time: float
    shots: int
    experiments: int


class ScalingRecord(BaseModel):
    row_kind: Literal["point", "fit"] = "point"
    series: str
    epsilon: Optional[float] = None
    rmse_omega: Optional[float] = None
    rmse_xi: Optional[float] = None
    rmse_re_h: Optional[float] = None
    rmse_im_h: Optional[float] = None
    evolution_time: Optional[float] = None
    experiments: Optional[float] = None
    shots: Optional[float] = None
    sql_shots: Optional[float] = None
    sql_rmse: Optional[float] = None
    sql_evolution_time: Optional[float] = None
    slope: Optional[float] = None
    slope_ci_low: Optional[float] = None
    slope_ci_high: Optional[float] = None
    fit_available: Optional[bool] = None


class BoundCheck(BaseModel):
    suite: str
    case: str
    measured: float
    bound: float
    passed: bool
    detail: str = ""
