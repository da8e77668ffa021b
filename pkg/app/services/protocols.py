"""
End-to-end learning protocols.

Every protocol runs on one engine: experiment families (an input amplitude,
the clusters it targets and the randomization applied during evolution)
produce shared batches of homodyne data keyed by (family, t, delta), and each
parameter's RFE run reads its signal from those batches.

Round 0 randomizes the phases of a vertex cover of the coupling graph, which
decouples every mode, and learns all omega_i and xi_i. Each color of the
distance-2 link-graph coloring then learns Re h_ij (Stage B) and Im h_ij
(Stage C) for all its edges in the same experiments.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas import (
    Coupling,
    EstimationReport,
    LatticeModel,
    ParameterEstimate,
    ProtocolConfig,
    ProtocolName,
)
from app.services.base import (
    MergeConflictError,
    ProtocolError,
    StreamPart,
    TruncationError,
    config_hash,
    make_rng,
    stream_key,
)
from app.services.budget import SignalBudget
from app.services.dynamics import (
    PairRotation,
    Propagator,
    RandomizationPlan,
    RotationKind,
    SpamChannel,
    apply_spam,
    apply_two_mode,
    effective_hamiltonian,
    evolve_exact,
    evolve_randomized,
    rotated_frame_hamiltonian,
    spam_density,
    spam_mixture,
    two_mode_rotation,
)
from app.services.fock import (
    FockVector,
    boundary_population,
    check_truncation,
    coherent_product,
    coherent_state,
    local_operator,
    reduced_density_matrix,
)
from app.services.homodyne import (
    PhaseSignal,
    TimeLedger,
    estimate_shared,
    signal_for_omega,
    signal_for_xi,
)
from app.services.lattice import (
    ColoringScheme,
    build_hamiltonian,
    clusters_for_color,
    color_link_graph,
    decoupling_cover,
    effective_model_for_color,
    randomized_modes_for_color,
)
from app.services.rfe import RfeSchedule, SignalProvider, rfe_run


logger = logging.getLogger(__name__)

Cluster = Tuple[int, ...]
QUARTER = math.pi / 4


@dataclass(frozen=True)
class ExperimentFamily:
    """One kind of experiment: every cluster prepared with `amplitude` on its first mode, measured there."""
    name: str
    amplitude: float
    clusters: Tuple[Cluster, ...]
    phase_modes: Tuple[int, ...] = ()
    randomizer: Optional[RotationKind] = None
    color: Optional[int] = None

    @property
    def frame(self) -> Optional[RotationKind]:
        """Rotation used to prepare and read out the rotated mode; the one not used for randomizing."""
        if self.randomizer is None:
            return None
        return "y" if self.randomizer == "x" else "x"

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return [c for c in self.clusters if len(c) == 2]

    @property
    def measured_modes(self) -> List[int]:
        return [c[0] for c in self.clusters]

    @property
    def randomized(self) -> bool:
        return bool(self.phase_modes) or (self.randomizer is not None and bool(self.pairs))


@dataclass
class Batch:
    values: Dict[int, complex]
    shots: int
    experiments: int
    spent: float


@dataclass
class SignalTap:
    """Batches read by one RFE run, for per-parameter accounting."""
    batches: List[Batch] = field(default_factory=list)

    @property
    def experiments(self) -> int:
        return sum(b.experiments for b in self.batches)

    @property
    def shots(self) -> int:
        return sum(b.shots for b in self.batches)


def _mean_b(rho: np.ndarray) -> complex:
    return complex(np.trace(rho @ local_operator("annihilate", rho.shape[0] - 1)))


class ProtocolRun:
    """State of one protocol execution: time ledger, batch cache, merged estimates."""

    def __init__(
        self,
        model: LatticeModel,
        cfg: ProtocolConfig,
        seed: int = 0,
        stream: Sequence[StreamPart] = (),
    ):
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.stream = tuple(stream)
        self.ledger = TimeLedger()
        self.batches: Dict[Tuple[str, float, float], Batch] = {}
        self.calibrated_steps: Dict[str, int] = {}
        self.diagnostics: Dict[str, float] = {}
        self.estimates: Dict[str, ParameterEstimate] = {}
        self.omega_budget = cfg.omega_budget()
        self.xi_budget = cfg.xi_budget()
        self.prep_spam = SpamChannel(cfg.spam_strength, "prep", cfg.spam_kind, cfg.spam_kick_scale)
        self.measure_spam = SpamChannel(cfg.spam_strength, "measure", cfg.spam_kind, cfg.spam_kick_scale)
        self.max_leakage = 0.0
        self.max_boundary = 0.0
        self.scheme: Optional[ColoringScheme] = None
        self._cluster_propagators: Dict[Tuple[Optional[int], Optional[str], Cluster], Propagator] = {}
        self._global_propagator: Optional[Propagator] = None

    def rng(self, *parts: StreamPart) -> np.random.Generator:
        return make_rng(self.seed, *self.stream, *parts)

    # ------------------------------------------------------------------
    # State preparation and readout
    # ------------------------------------------------------------------

    def _rotate_pairs(self, state: FockVector, frame: RotationKind, pairs: Sequence[Tuple[int, int]], theta: float) -> FockVector:
        rotation = two_mode_rotation(frame, theta, self.cfg.cutoff)
        for pair in pairs:
            state = apply_two_mode(rotation, pair, state)
        return state

    def _prepare(self, family: ExperimentFamily, num_modes: int, pairs: Sequence[Tuple[int, int]], measured: Sequence[int]) -> FockVector:
        """|alpha> on each measured mode (vacuum elsewhere), then U_frame(-pi/4) on every pair."""
        if len(measured) == 1:
            state = coherent_state(family.amplitude, num_modes, measured[0], self.cfg.cutoff)
        else:
            alphas = [0.0] * num_modes
            for mode in measured:
                alphas[mode] = family.amplitude
            state = coherent_product(alphas, self.cfg.cutoff)
        leakage = check_truncation(state, self.cfg.leak_tol)
        self.max_leakage = max(self.max_leakage, leakage)
        if pairs:
            state = self._rotate_pairs(state, family.frame, pairs, -QUARTER)
        return state

    def _readout(self, family: ExperimentFamily, state: FockVector, pairs: Sequence[Tuple[int, int]]) -> FockVector:
        if pairs:
            state = self._rotate_pairs(state, family.frame, pairs, QUARTER)
        return state

    def _check_boundary(self, state: FockVector, family: ExperimentFamily, t: float) -> None:
        """The evolved state must keep its weight off the top Fock level."""
        population = boundary_population(state)
        self.max_boundary = max(self.max_boundary, population)
        if population > self.cfg.leak_tol:
            raise TruncationError(
                f"{family.name} at t = {t:.4g}: boundary population {population:.3g} exceeds "
                f"leak_tol {self.cfg.leak_tol:.3g}; increase the cutoff"
            )

    # ------------------------------------------------------------------
    # Effective dynamics (cluster-factorized)
    # ------------------------------------------------------------------

    def _effective_model(self, family: ExperimentFamily) -> LatticeModel:
        """Couplings surviving the family's randomization: its color class, or those off the phase modes."""
        if family.color is None:
            return effective_hamiltonian(self.model, family.phase_modes)
        if self.scheme is None:
            raise ProtocolError(f"{family.name} targets color {family.color} before the link graph was colored")
        return effective_model_for_color(self.model, family.color, self.scheme)

    def _cluster_propagator(self, family: ExperimentFamily, cluster: Cluster) -> Propagator:
        pair = len(cluster) == 2
        key = (family.color, family.randomizer if pair else None, cluster)
        if key not in self._cluster_propagators:
            effective = self._effective_model(family)
            omega = [effective.omega[m] for m in cluster]
            xi = [effective.xi[m] for m in cluster]
            if not pair:
                sub = LatticeModel(num_modes=1, omega=omega, xi=xi)
                hamiltonian = build_hamiltonian(sub, self.cfg.cutoff)
            else:
                h = effective.hopping(*cluster)
                sub = LatticeModel(
                    num_modes=2, omega=omega, xi=xi, couplings=[Coupling(i=0, j=1, re=h.real, im=h.imag)]
                )
                hamiltonian = rotated_frame_hamiltonian(sub, family.randomizer, self.cfg.cutoff)
            self._cluster_propagators[key] = Propagator(hamiltonian, self.cfg.leak_tol)
        return self._cluster_propagators[key]

    def _effective_densities(self, family: ExperimentFamily, t: float, rng: np.random.Generator) -> Dict[int, np.ndarray]:
        densities: Dict[int, np.ndarray] = {}
        for cluster in family.clusters:
            propagator = self._cluster_propagator(family, cluster)
            pairs = [(0, 1)] if len(cluster) == 2 else []
            prepared = self._prepare(family, len(cluster), pairs, [0])
            rho = np.zeros((self.cfg.cutoff + 1,) * 2, dtype=complex)
            for weight, component in spam_mixture(self.prep_spam, prepared, rng, self.cfg.spam_kicks):
                evolved = evolve_exact(propagator, component, t, self.cfg.leak_tol)
                self._check_boundary(evolved, family, t)
                evolved = self._readout(family, evolved, pairs)
                rho +=weight * reduced_density_matrix(evolved, 0)
            densities[cluster[0]] = rho
        return densities

    # ------------------------------------------------------------------
    # Randomized dynamics (global state, Monte-Carlo trajectories)
    # ------------------------------------------------------------------

    def _global(self) -> Propagator:
        if self._global_propagator is None:
            hamiltonian = build_hamiltonian(self.model, self.cfg.cutoff)
            self._global_propagator = Propagator(hamiltonian, self.cfg.leak_tol)
        return self._global_propagator

    def trajectory_densities(self, family: ExperimentFamily, t: float, steps: int, batch: int) -> Dict[int, np.ndarray]:
        """Trajectory-averaged marginals of the measured modes under `steps` randomized insertions."""
        propagator = self._global()
        pairs = family.pairs
        rotations = tuple(PairRotation(family.randomizer, p) for p in pairs) if family.randomizer else ()
        plan = RandomizationPlan(
            steps=steps,
            phase_modes=family.phase_modes,
            rotations=rotations,
            seed=self.seed,
            stream=stream_key(*self.stream, family.name, batch, steps),
        )
        prepared = self._prepare(family, self.model.num_modes, pairs, family.measured_modes)
        sums = {m: np.zeros((self.cfg.cutoff + 1,) * 2, dtype=complex) for m in family.measured_modes}
        for k in range(self.cfg.trajectories):
            rng = self.rng(family.name, batch, "trajectory", k)
            state = apply_spam(self.prep_spam, prepared, rng)
            if family.randomized:
                state = evolve_randomized(propagator, state, t, plan, rng, self.cfg.leak_tol)
            else:
                state = evolve_exact(propagator, state, t, self.cfg.leak_tol)
            self._check_boundary(state, family, t)
            state = self._readout(family, state, pairs)
            for mode in sums:
                sums[mode] += reduced_density_matrix(state, mode)
        return {m: s / self.cfg.trajectories for m, s in sums.items()}

    def _randomized_densities(self, family: ExperimentFamily, t: float, budget: SignalBudget, batch: int) -> Dict[int, np.ndarray]:
        """Double r from r_initial until <b> moves by less than eta0/2 on every measured mode."""
        if not family.randomized:
            return self.trajectory_densities(family, t, 1, batch)
        steps = self.cfg.r_initial
        current = self.trajectory_densities(family, t, steps, batch)
        settled = False
        while 2 * steps <= self.cfg.r_max:
            refined = self.trajectory_densities(family, t, 2 * steps, batch)
            gap = max(abs(_mean_b(refined[m]) - _mean_b(current[m])) for m in current)
            steps, current = 2 * steps, refined
            if gap < budget.eta0 / 2:
                settled = True
                break
        if not settled:
            logger.warning(f"{family.name} at t = {t:.4g}: r capped at {steps} before <b> settled within eta0/2")
        self.calibrated_steps[f"{family.name}@t={t:.6g}"] = steps
        logger.info(f"Calibrated r = {steps} for {family.name} at t = {t:.4g}")
        return current

    # ------------------------------------------------------------------
    # Shared batches
    # ------------------------------------------------------------------

    def batch(self, family: ExperimentFamily, t: float, delta: float, budget: SignalBudget) -> Batch:
        """Averaged amplitudes on every measured mode from one shared set of experiments."""
        key = (family.name, t, delta)
        if key in self.batches:
            return self.batches[key]
        index = len(self.batches)
        rng = self.rng(family.name, index)
        if self.cfg.dynamics == "randomized":
            densities = self._randomized_densities(family, t, budget, index)
        else:
            densities = self._effective_densities(family, t, rng)
        densities = {
            m: spam_density(self.measure_spam, rho, rng, self.cfg.spam_kicks) for m, rho in densities.items()
        }

        shots = budget.shots_for_delta(delta)
        time_before, experiments_before = self.ledger.evolution_time, self.ledger.experiments
        sample = dict(
            M=budget.M,
            rng=rng,
            ledger=self.ledger,
            t=t,
            sampling=self.cfg.shot_sampling,
            exact_shot_limit=self.cfg.exact_shot_limit,
            grid_step=self.cfg.grid_step,
        )
        values = estimate_shared(densities, L=shots, **sample)
        total = shots
        if any(v == 0 for v in values.values()):
            logger.warning(f"Zero averaged signal in {family.name} at t = {t:.4g}; resampling with {2 * shots} shots")
            values = estimate_shared(densities, L=2 * shots, **sample)
            total += 2 * shots
        logger.debug(f"Batch {family.name} t = {t:.4g}: L = {shots} shots per quadrature on {len(densities)} modes")

        result = Batch(
            values=values,
            shots=2 * total,
            experiments=self.ledger.experiments - experiments_before,
            spent=self.ledger.evolution_time - time_before,
        )
        self.batches[key] = result
        return result

    def omega_provider(self, family: ExperimentFamily, mode: int, tap: SignalTap) -> SignalProvider:
        def provide(t: float, delta: float) -> PhaseSignal:
            batch = self.batch(family, t, delta, self.omega_budget)
            tap.batches.append(batch)
            return signal_for_omega(batch.values[mode], t, batch.shots, delta, batch.spent)
        return provide

    def xi_provider(self, first: ExperimentFamily, second: ExperimentFamily, mode: int, tap: SignalTap) -> SignalProvider:
        """Conjugated so the RFE run sees exp(-i xi t)."""
        def provide(t: float, delta: float) -> PhaseSignal:
            a = self.batch(first, t, delta, self.xi_budget)
            b = self.batch(second, t, delta, self.xi_budget)
            tap.batches.extend([a, b])
            signal = signal_for_xi(
                a.values[mode],
                b.values[mode],
                first.amplitude,
                second.amplitude,
                t,
                a.shots + b.shots,
                delta,
                a.spent + b.spent,
            )
            return signal.conjugate()
        return provide

    # ------------------------------------------------------------------
    # Estimates
    # ------------------------------------------------------------------

    def learn(self, name: str, round_name: str, provider: SignalProvider, tap: SignalTap, W: float, epsilon: float) -> ParameterEstimate:
        result = rfe_run(provider, RfeSchedule(W=W, epsilon=epsilon))
        if result.fallbacks:
            self.diagnostics[f"{name}_fallbacks"] = float(result.fallbacks)
        if result.clamps:
            self.diagnostics[f"{name}_clamps"] = float(result.clamps)
        budget = self.diagnostics.get("rfe_failure_budget", 0.0)
        self.diagnostics["rfe_failure_budget"] = max(budget, result.failure_budget)
        return ParameterEstimate(
            name=name,
            estimate=result.estimate,
            evolution_time=result.total_time,
            shots=tap.shots,
            experiments=tap.experiments,
            round=round_name,
        )

    def record(self, estimate: ParameterEstimate) -> None:
        if estimate.name in self.estimates:
            raise MergeConflictError(
                f"{estimate.name} learned in both {self.estimates[estimate.name].round} and {estimate.round}"
            )
        self.estimates[estimate.name] = estimate

    def learn_decoupled(self) -> None:
        """Round 0: every omega_i and xi_i from experiments with all couplings averaged away."""
        cfg = self.cfg
        n = self.model.num_modes
        cover = tuple(decoupling_cover(self.model))
        singles = tuple((m,) for m in range(n))
        omega_family = ExperimentFamily("omega", cfg.alpha, singles, cover)
        xi_first = ExperimentFamily("xi1", cfg.alpha1, singles, cover)
        xi_second = ExperimentFamily("xi2", cfg.alpha2, singles, cover)
        # (omega_i + omega_j)/2 enters Re/Im h, so each omega gets half the error budget in variance
        omega_epsilon = cfg.epsilon / math.sqrt(2) if self.model.edges else cfg.epsilon
        logger.info(f"Round 0: learning omega and xi on {n} modes, phase-randomizing modes {list(cover)}")

        for mode in range(n):
            tap = SignalTap()
            provider = self.omega_provider(omega_family, mode, tap)
            self.record(self.learn(f"omega_{mode}", "decoupled", provider, tap, cfg.W, omega_epsilon))
        for mode in range(n):
            tap = SignalTap()
            provider = self.xi_provider(xi_first, xi_second, mode, tap)
            self.record(self.learn(f"xi_{mode}", "decoupled", provider, tap, cfg.W, cfg.epsilon))

    def learn_couplings(self) -> None:
        """Stages B and C for every color; needs round 0 frequencies."""
        cfg = self.cfg
        missing = [m for m in range(self.model.num_modes) if f"omega_{m}" not in self.estimates]
        if missing:
            raise ProtocolError(f"coupling stages need round 0 frequencies first; missing modes {missing}")
        scheme = self.scheme = color_link_graph(self.model)
        self.diagnostics["colors"] = float(scheme.chi)

        for color in scheme.color_ids():
            pairs = tuple(c for c in clusters_for_color(self.model, scheme, color).clusters if len(c) == 2)
            phase_modes = tuple(randomized_modes_for_color(self.model, scheme, color))
            logger.info(f"Color {color}: Stages B and C on pairs {list(pairs)}, phase-randomizing {list(phase_modes)}")
            for part, randomizer in (("re", "x"), ("im", "y")):
                family = ExperimentFamily(f"{part}_c{color}", cfg.alpha, pairs, phase_modes, randomizer, color)
                for i, j in pairs:
                    tap = SignalTap()
                    provider = self.omega_provider(family, i, tap)
                    tilde = self.learn(
                        f"omega_tilde_{part}_{i}_{j}", f"color_{color}", provider, tap, cfg.W_rotated, cfg.epsilon / 2
                    )
                    self.diagnostics[tilde.name] = tilde.estimate
                    mean = (self.estimates[f"omega_{i}"].estimate + self.estimates[f"omega_{j}"].estimate) / 2
                    self.record(tilde.model_copy(update={"name": f"{part}_h_{i}_{j}", "estimate": tilde.estimate - mean}))
            if cfg.learn_rotated_anharmonicity:
                self._learn_rotated_anharmonicity(color, pairs, phase_modes)

    def _learn_rotated_anharmonicity(self, color: int, pairs: Tuple[Tuple[int, int], ...], phase_modes: Tuple[int, ...]) -> None:
        """Diagnostic: quartic coefficient of the Stage-B mode, (xi_i + xi_j)/4 in the (xi/2) n(n-1) convention."""
        cfg = self.cfg
        first = ExperimentFamily(f"re_c{color}_xi1", cfg.alpha1, pairs, phase_modes, "x", color)
        second = ExperimentFamily(f"re_c{color}_xi2", cfg.alpha2, pairs, phase_modes, "x", color)
        for i, j in pairs:
            tap = SignalTap()
            provider = self.xi_provider(first, second, i, tap)
            estimate = self.learn(f"xi_tilde_{i}_{j}", f"color_{color}", provider, tap, cfg.W, cfg.epsilon)
            self.diagnostics[f"xi_tilde_{i}_{j}"] = estimate.estimate
            self.diagnostics[f"xi_tilde_{i}_{j}_expected"] = (self.model.xi[i] + self.model.xi[j]) / 4

    def report(self, protocol: str, wall_time: float) -> EstimationReport:
        truth = self.model.parameters()
        missing = [name for name in truth if name not in self.estimates]
        extra = [name for name in self.estimates if name not in truth]
        if missing or extra:
            raise ProtocolError(f"parameter coverage mismatch: missing {missing}, unexpected {extra}")
        parameters = [
            self.estimates[name].model_copy(
                update={"true_value": value, "error": self.estimates[name].estimate - value}
            )
            for name, value in truth.items()
        ]
        self.diagnostics["prep_leakage"] = self.max_leakage
        self.diagnostics["boundary_population"] = self.max_boundary
        self.diagnostics["batches"] = float(len(self.batches))
        return EstimationReport(
            protocol=protocol,
            parameters=parameters,
            total_evolution_time=self.ledger.evolution_time,
            total_shots=self.ledger.shots,
            total_experiments=self.ledger.experiments,
            wall_time=wall_time,
            config_hash=config_hash({"model": self.model.model_dump(), "protocol": self.cfg.model_dump()}),
            seed=self.seed,
            stream=list(stream_key(*self.stream)),
            cutoff=self.cfg.cutoff,
            calibrated_steps=self.calibrated_steps,
            diagnostics=self.diagnostics,
        )


# ============================================================================
# Protocols
# ============================================================================

def _execute(protocol: str, model: LatticeModel, cfg: ProtocolConfig, seed: int, stream: Sequence[StreamPart]) -> EstimationReport:
    start = time.perf_counter()
    run = ProtocolRun(model, cfg, seed, stream)
    run.learn_decoupled()
    if model.edges:
        run.learn_couplings()
    report = run.report(protocol, time.perf_counter() - start)
    logger.info(
        f"{protocol}: {len(report.parameters)} parameters, evolution time {report.total_evolution_time:.4g}, "
        f"{report.total_experiments} experiments"
    )
    return report


def learn_single_mode(model: LatticeModel, cfg: ProtocolConfig, seed: int = 0, stream: Sequence[StreamPart] = ()) -> EstimationReport:
    """omega and xi of one anharmonic oscillator."""
    if model.num_modes != 1:
        raise ProtocolError(f"single_mode protocol needs 1 mode, got {model.num_modes}")
    return _execute("single_mode", model, cfg, seed, stream)


def learn_two_mode(model: LatticeModel, cfg: ProtocolConfig, seed: int = 0, stream: Sequence[StreamPart] = ()) -> EstimationReport:
    """Stage A on both modes, then Re h_01 and Im h_01 in rotated frames."""
    if model.num_modes != 2:
        raise ProtocolError(f"two_mode protocol needs 2 modes, got {model.num_modes}")
    return _execute("two_mode", model, cfg, seed, stream)


def learn_lattice(model: LatticeModel, cfg: ProtocolConfig, seed: int = 0, stream: Sequence[StreamPart] = ()) -> EstimationReport:
    return _execute("lattice", model, cfg, seed, stream)


# Protocol registry mapping name to learn function
PROTOCOLS: Dict[str, Callable[..., EstimationReport]] = {
    "single_mode": learn_single_mode,
    "two_mode": learn_two_mode,
    "lattice": learn_lattice,
}


def resolve_protocol(name: ProtocolName, model: LatticeModel) -> str:
    if name != "auto":
        return name
    if model.num_modes == 1:
        return "single_mode"
    if model.num_modes == 2:
        return "two_mode"
    return "lattice"


def run_protocol(model: LatticeModel, cfg: ProtocolConfig, seed: int = 0, stream: Sequence[StreamPart] = ()) -> EstimationReport:
    name = resolve_protocol(cfg.name, model)
    logger.info(f"Running {name} on {model.num_modes} modes, {len(model.edges)} couplings")
    return PROTOCOLS[name](model, cfg, seed, stream)
