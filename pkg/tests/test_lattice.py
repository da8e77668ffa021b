import numpy as np
import pytest
from pydantic import ValidationError

from app.schemas import Coupling, LatticeModel, ModelSpec
from app.services.base import ColoringError
from app.services.fock import to_index
from app.services.lattice import (
    ColoringScheme,
    build_hamiltonian,
    chain,
    clusters_for_color,
    color_link_graph,
    decoupling_cover,
    effective_model_for_color,
    grid,
    link_graph,
    model_from_spec,
    randomized_modes_for_color,
    validate_coloring,
)


class TestModel:
    def test_couplings_are_canonicalized(self):
        model = LatticeModel(num_modes=2, omega=[0, 0], xi=[0, 0], couplings=[Coupling(i=1, j=0, re=0.2, im=0.3)])
        assert model.couplings[0].edge == (0, 1)
        assert model.hopping(0, 1) == pytest.approx(0.2 - 0.3j)
        assert model.hopping(1, 0) == pytest.approx(0.2 + 0.3j)

    def test_inconsistent_pair_rejected(self):
        with pytest.raises(ValidationError):
            LatticeModel(
                num_modes=2,
                omega=[0, 0],
                xi=[0, 0],
                couplings=[Coupling(i=0, j=1, re=0.2), Coupling(i=1, j=0, re=0.3)],
            )

    def test_parameter_bound(self):
        with pytest.raises(ValidationError):
            LatticeModel(num_modes=1, omega=[1.2], xi=[0.0])

    def test_parameter_names_for_chain(self):
        model = chain(4, hopping=[(0.1, 0.2)] * 3)
        names = list(model.parameters())
        assert len(names) == 14
        assert names[:2] == ["omega_0", "omega_1"]
        assert "re_h_2_3" in names and "im_h_2_3" in names

    def test_random_model_from_spec_is_reproducible(self):
        spec = ModelSpec(kind="chain", num_modes=3, random_parameters=True)
        a = model_from_spec(spec, np.random.default_rng(5))
        b = model_from_spec(spec, np.random.default_rng(5))
        assert a == b
        assert all(abs(c.value) <= 1.0 for c in a.couplings)


class TestHamiltonian:
    def test_single_mode_spectrum(self):
        model = LatticeModel(num_modes=1, omega=[0.7], xi=[0.3])
        diagonal = build_hamiltonian(model, 4).diagonal().real
        n = np.arange(5)
        np.testing.assert_allclose(diagonal, 0.7 * n + 0.15 * n * (n - 1), atol=1e-12)

    def test_hopping_matrix_element(self):
        model = LatticeModel(num_modes=2, omega=[0, 0], xi=[0, 0], couplings=[Coupling(i=0, j=1, re=0.2, im=0.1)])
        cutoff = 3
        hamiltonian = build_hamiltonian(model, cutoff).toarray()
        row, col = to_index((1, 0), cutoff), to_index((0, 1), cutoff)
        assert hamiltonian[row, col] == pytest.approx(0.2 + 0.1j)
        np.testing.assert_allclose(hamiltonian, hamiltonian.conj().T, atol=1e-12)


class TestColoring:
    def test_link_graph_joins_edges_sharing_a_mode(self):
        links = link_graph(chain(4))
        assert sorted(links.nodes) == [(0, 1), (1, 2), (2, 3)]
        assert links.has_edge((0, 1), (1, 2))
        assert links.has_edge((1, 2), (2, 3))
        assert not links.has_edge((0, 1), (2, 3))

    def test_link_graph_of_a_star_is_a_triangle(self):
        star = LatticeModel(
            num_modes=4,
            omega=[0] * 4,
            xi=[0] * 4,
            couplings=[Coupling(i=2, j=0, re=0.1), Coupling(i=0, j=1, re=0.1), Coupling(i=3, j=0, re=0.1)],
        )
        links = link_graph(star)
        assert sorted(links.nodes) == [(0, 1), (0, 2), (0, 3)]
        assert links.number_of_edges() == 3

    def test_chain_uses_three_colors(self):
        scheme = color_link_graph(chain(6))
        assert scheme.chi == 3
        assert scheme.colors[(0, 1)] == scheme.colors[(3, 4)] == 0

    def test_grid_respects_degree_bound(self):
        model = grid(3, 3)
        scheme = color_link_graph(model)
        validate_coloring(model, scheme)
        assert scheme.chi <= 4 * (model.degree_bound - 1) ** 2 + 1

    def test_conflicting_coloring_rejected(self):
        model = chain(4)
        scheme = ColoringScheme({edge: 0 for edge in model.edges})
        with pytest.raises(ColoringError):
            validate_coloring(model, scheme)

    def test_clusters_and_spectators(self):
        model = chain(5)
        scheme = color_link_graph(model)
        clusters = clusters_for_color(model, scheme, 0)
        assert clusters.clusters == [(0, 1), (3, 4)]
        assert clusters.spectators == [2]
        assert randomized_modes_for_color(model, scheme, 0) == [2]
        assert effective_model_for_color(model, 0, scheme).edges == [(0, 1), (3, 4)]

    def test_isolated_mode_forms_its_own_cluster(self):
        model = LatticeModel(num_modes=3, omega=[0] * 3, xi=[0] * 3, couplings=[Coupling(i=0, j=1, re=0.1)])
        clusters = clusters_for_color(model, color_link_graph(model), 0)
        assert clusters.clusters == [(0, 1), (2,)]

    def test_decoupling_cover_touches_every_edge(self):
        model = grid(2, 3)
        cover = set(decoupling_cover(model))
        assert all(cover & set(edge) for edge in model.edges)
        assert decoupling_cover(chain(2)) == [0]
