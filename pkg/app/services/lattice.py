"""
Number-conserving bosonic lattice Hamiltonians and the distance-2 link-graph
coloring that splits them into independently learnable clusters.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp

from app.schemas import Coupling, LatticeModel, ModelSpec
from app.services.base import HERMITICITY_TOL, ColoringError, ConfigError, HermiticityError
from app.services.fock import ModeOperator, mode_matrix


logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


@dataclass(frozen=True)
class ColoringScheme:
    colors: Dict[Edge, int] = field(default_factory=dict)

    @property
    def chi(self) -> int:
        return len(set(self.colors.values()))

    def color_ids(self) -> List[int]:
        return sorted(set(self.colors.values()))

    def edges_of(self, color: int) -> List[Edge]:
        return sorted(edge for edge, c in self.colors.items() if c == color)


@dataclass(frozen=True)
class ColorClusters:
    color: int
    clusters: List[Tuple[int, ...]]
    spectators: List[int]


# ============================================================================
# Constructors
# ============================================================================

def chain_edges(num_modes: int) -> List[Edge]:
    return [(i, i + 1) for i in range(num_modes - 1)]


def grid_edges(rows: int, cols: int) -> List[Edge]:
    edges = []
    for r in range(rows):
        for c in range(cols):
            site = r * cols + c
            if c + 1 < cols:
                edges.append((site, site + 1))
            if r + 1 < rows:
                edges.append((site, site + cols))
    return sorted(edges)


def _model(
    num_modes: int,
    edges: Sequence[Edge],
    omega: Optional[Sequence[float]],
    xi: Optional[Sequence[float]],
    hopping: Optional[Sequence[Tuple[float, float]]],
) -> LatticeModel:
    omega = list(omega) if omega is not None else [0.0] * num_modes
    xi = list(xi) if xi is not None else [0.0] * num_modes
    hopping = list(hopping) if hopping is not None else [(0.0, 0.0)] * len(edges)
    if len(hopping) != len(edges):
        raise ConfigError(f"{len(edges)} edges but {len(hopping)} hopping values")
    couplings = [Coupling(i=i, j=j, re=re, im=im) for (i, j), (re, im) in zip(edges, hopping)]
    return LatticeModel(num_modes=num_modes, omega=omega, xi=xi, couplings=couplings)


def chain(num_modes: int, omega=None, xi=None, hopping=None) -> LatticeModel:
    return _model(num_modes, chain_edges(num_modes), omega, xi, hopping)


def grid(rows: int, cols: int, omega=None, xi=None, hopping=None) -> LatticeModel:
    return _model(rows * cols, grid_edges(rows, cols), omega, xi, hopping)


def random_model(
    num_modes: int,
    edges: Sequence[Edge],
    rng: np.random.Generator,
    bound: float = 1.0,
) -> LatticeModel:
    """Parameters drawn uniformly within the bounds; |h_ij| uniform with a uniform phase."""
    omega = rng.uniform(-bound, bound, num_modes).tolist()
    xi = rng.uniform(-bound, bound, num_modes).tolist()
    moduli = rng.uniform(0.0, bound, len(edges))
    phases = rng.uniform(0.0, 2 * np.pi, len(edges))
    hopping = [(float(m * np.cos(p)), float(m * np.sin(p))) for m, p in zip(moduli, phases)]
    return _model(num_modes, list(edges), omega, xi, hopping)


def spec_edges(spec: ModelSpec) -> Tuple[int, List[Edge]]:
    if spec.kind == "chain":
        return spec.num_modes, chain_edges(spec.num_modes)
    if spec.kind == "grid":
        return spec.rows * spec.cols, grid_edges(spec.rows, spec.cols)
    if spec.couplings is not None:
        edges = [c.canonical().edge for c in spec.couplings]
    else:
        edges = [tuple(sorted(e)) for e in (spec.edges or [])]
    num_modes = spec.num_modes if spec.num_modes is not None else len(spec.omega)
    return num_modes, edges


def model_from_spec(spec: ModelSpec, rng: Optional[np.random.Generator] = None) -> LatticeModel:
    """Materialize the true model; random parameters come from `rng` unless `random_seed` is pinned."""
    num_modes, edges = spec_edges(spec)
    if spec.random_parameters:
        if spec.random_seed is not None:
            rng = np.random.default_rng(spec.random_seed)
        if rng is None:
            raise ConfigError("random_parameters needs a random_seed or a trial stream")
        return random_model(num_modes, edges, rng, spec.parameter_bound)
    if spec.kind == "explicit" and spec.couplings is not None:
        return LatticeModel(num_modes=num_modes, omega=spec.omega, xi=spec.xi, couplings=spec.couplings)
    return _model(num_modes, edges, spec.omega, spec.xi, spec.hopping)


# ============================================================================
# Hamiltonian
# ============================================================================

def occupation_table(num_modes: int, cutoff: int) -> np.ndarray:
    """(dim, num_modes) array of occupations in basis order."""
    grids = np.indices((cutoff + 1,) * num_modes).reshape(num_modes, -1)
    return grids.T


def build_hamiltonian(model: LatticeModel, cutoff: int) -> sp.csr_matrix:
    """H = sum h_ij b_i^dag b_j + h.c. + sum omega_i n_i + sum (xi_i/2) n_i(n_i-1) on the truncated space."""
    n = occupation_table(model.num_modes, cutoff).astype(float)
    omega = np.asarray(model.omega)
    xi = np.asarray(model.xi)
    diagonal = n @ omega + (n * (n - 1)) @ (xi / 2)
    hamiltonian = sp.diags(diagonal.astype(complex), format="csr")

    for c in model.couplings:
        create = mode_matrix(ModeOperator("create", c.i), model.num_modes, cutoff)
        hop = create @ mode_matrix(ModeOperator("annihilate", c.j), model.num_modes, cutoff)
        hamiltonian = hamiltonian + c.value * hop + np.conj(c.value) * hop.conj().T

    hamiltonian = sp.csr_matrix(hamiltonian)
    check_hermitian(hamiltonian)
    return hamiltonian


def check_hermitian(matrix, tol: float = HERMITICITY_TOL) -> None:
    difference = matrix - matrix.conj().T
    worst = abs(difference).max() if sp.issparse(difference) else np.abs(difference).max()
    if worst > tol:
        raise HermiticityError(f"operator deviates from Hermitian by {worst:.3g}")


def total_number(num_modes: int, cutoff: int) -> sp.csr_matrix:
    return sp.diags(occupation_table(num_modes, cutoff).sum(axis=1).astype(complex), format="csr")


# ============================================================================
# Link-graph coloring
# ============================================================================

def link_graph(model: LatticeModel) -> nx.Graph:
    """Vertices are the model's edges; two are adjacent when they share a mode."""
    coupling_graph = nx.Graph(model.edges)
    links = nx.line_graph(coupling_graph)
    # line_graph keeps networkx's edge orientation; node labels follow the canonical (i < j) edges
    return nx.relabel_nodes(links, {edge: tuple(sorted(edge)) for edge in links.nodes})


def _lexicographic(graph: nx.Graph, colors: Dict) -> List:
    return sorted(graph)


def color_link_graph(model: LatticeModel) -> ColoringScheme:
    """Greedy distance-2 coloring of the link graph, edges visited in lexicographic order."""
    squared = nx.power(link_graph(model), 2) if model.edges else nx.Graph()
    colors = nx.coloring.greedy_color(squared, strategy=_lexicographic)
    scheme = ColoringScheme({edge: int(c) for edge, c in colors.items()})
    validate_coloring(model, scheme)
    bound = 4 * (model.degree_bound - 1) ** 2 + 1 if model.edges else 0
    if scheme.chi > bound:
        raise ColoringError(f"coloring uses {scheme.chi} colors, above the degree bound {bound}")
    logger.debug(f"Colored {len(model.edges)} edges with {scheme.chi} colors")
    return scheme


def edges_conflict(a: Edge, b: Edge, adjacency: Dict[int, set]) -> bool:
    """True when a and b share a mode or are joined by one intermediate edge."""
    if set(a) & set(b):
        return True
    return any(v in adjacency[u] for u in a for v in b)


def validate_coloring(model: LatticeModel, scheme: ColoringScheme) -> None:
    if set(scheme.colors) != set(model.edges):
        raise ColoringError("coloring does not cover exactly the model's edges")
    adjacency: Dict[int, set] = {m: set() for m in range(model.num_modes)}
    for i, j in model.edges:
        adjacency[i].add(j)
        adjacency[j].add(i)
    edges = model.edges
    for a in range(len(edges)):
        for b in range(a + 1, len(edges)):
            if scheme.colors[edges[a]] == scheme.colors[edges[b]] and edges_conflict(edges[a], edges[b], adjacency):
                raise ColoringError(f"edges {edges[a]} and {edges[b]} share a color within distance 2")


def isolated_modes(model: LatticeModel) -> List[int]:
    touched = {m for edge in model.edges for m in edge}
    return [m for m in range(model.num_modes) if m not in touched]


def clusters_for_color(model: LatticeModel, scheme: ColoringScheme, color: int) -> ColorClusters:
    """Clusters (retained edges and isolated modes) and spectators for one color."""
    validate_coloring(model, scheme)
    clusters: List[Tuple[int, ...]] = []
    seen: Dict[int, Edge] = {}
    for edge in scheme.edges_of(color):
        for mode in edge:
            if mode in seen:
                raise ColoringError(f"mode {mode} interacts through both {seen[mode]} and {edge}")
            seen[mode] = edge
        clusters.append(edge)
    clusters.extend((m,) for m in isolated_modes(model))
    covered = {m for cluster in clusters for m in cluster}
    spectators = [m for m in range(model.num_modes) if m not in covered]
    return ColorClusters(color=color, clusters=sorted(clusters), spectators=spectators)


def randomized_modes_for_color(model: LatticeModel, scheme: ColoringScheme, color: int) -> List[int]:
    """Modes outside the color's edges; their phases are randomized in that round."""
    kept = {m for edge in scheme.edges_of(color) for m in edge}
    return [m for m in range(model.num_modes) if m not in kept]


def effective_model_for_color(model: LatticeModel, color: int, scheme: ColoringScheme) -> LatticeModel:
    """Model with every coupling outside the color class removed."""
    return model.restricted_to(scheme.edges_of(color))


def decoupling_cover(model: LatticeModel) -> List[int]:
    """Greedy vertex cover: randomizing these phases removes every coupling."""
    cover: set = set()
    for i, j in model.edges:
        if i not in cover and j not in cover:
            cover.add(i)
    return sorted(cover)
