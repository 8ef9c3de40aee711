import numpy as np
import pytest

from allsmiles import molgraph
from allsmiles.errors import DisconnectedGraph, DuplicateBond, ValenceExceeded
from allsmiles.molgraph import Atom, Bond, BondOrder
from allsmiles.smiles import parse


def graph(s):
    return parse(s).graph


def test_single_carbon_is_valid() -> None:
    g = molgraph.build_graph([Atom('C')], [])
    assert len(g) == 1
    assert molgraph.graph_diameter(g) == 0


def test_duplicate_bond_rejected() -> None:
    atoms = [Atom('C'), Atom('C')]
    bonds = [Bond(0, 1, BondOrder.TRIPLE), Bond(0, 1, BondOrder.SINGLE)]
    with pytest.raises(DuplicateBond):
        molgraph.build_graph(atoms, bonds)


def test_self_bond_rejected() -> None:
    with pytest.raises(DuplicateBond):
        molgraph.build_graph([Atom('C')], [Bond(0, 0)])


def test_oxygen_triple_bond_exceeds_valence() -> None:
    with pytest.raises(ValenceExceeded) as info:
        molgraph.build_graph([Atom('O'), Atom('O')], [Bond(0, 1, BondOrder.TRIPLE)])
    assert info.value.atom == 0


def test_disconnected_rejected() -> None:
    with pytest.raises(DisconnectedGraph) as info:
        molgraph.build_graph([Atom('C'), Atom('C')], [])
    assert info.value.components == 2


def test_implicit_hydrogens() -> None:
    assert molgraph.implicit_hydrogens(Atom('C'), 0) == 4
    assert molgraph.implicit_hydrogens(Atom('O'), 2) == 0
    assert molgraph.implicit_hydrogens(Atom('N'), 4) == 1
    assert molgraph.implicit_hydrogens(Atom('O'), 3) == 0
    assert molgraph.implicit_hydrogens(Atom('C', explicit_h=0), 0) == 0
    assert molgraph.implicit_hydrogens(Atom('C', aromatic=True), 2) == 1


def test_molecular_weight_examples() -> None:
    assert molgraph.molecular_weight(graph('C')) == pytest.approx(16.043, abs=1e-3)
    assert molgraph.molecular_weight(graph('CCO')) == pytest.approx(46.069, abs=1e-3)
    assert molgraph.molecular_weight(graph('[13CH4]')) == pytest.approx(17.035, abs=1e-3)


def test_benzene_has_six_hydrogens() -> None:
    assert molgraph.formula(graph('c1ccccc1')) == 'C6H6'
    assert molgraph.formula(graph('CCO')) == 'C2H6O'


def test_methyl_insertion_adds_fixed_mass(corpus_smiles) -> None:
    for s in corpus_smiles:
        g = graph(s)
        if g.atoms[0].element != 'C' or g.atoms[0].bracket:
            continue
        heavier = graph('C' + s) if s[0] != '[' else None
        if heavier is None:
            continue
        delta = molgraph.molecular_weight(heavier) - molgraph.molecular_weight(g)
        # only saturated sp3 carbons gain exactly CH2
        if molgraph.implicit_hydrogens(g.atoms[0], g.bond_order_sum(0)) >= 1:
            assert delta == pytest.approx(14.027, abs=1e-3)


def test_graph_diameter() -> None:
    assert molgraph.graph_diameter(graph('CCCC')) == 3
    assert molgraph.graph_diameter(graph('C1CC1')) == 1


def test_graph_diameter_matches_all_pairs_oracle(corpus_smiles) -> None:
    for s in corpus_smiles:
        g = graph(s)
        n = len(g)
        dist = np.full((n, n), np.inf)
        np.fill_diagonal(dist, 0)
        for bond in g.bonds:
            dist[bond.a, bond.b] = dist[bond.b, bond.a] = 1
        for k in range(n):
            dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
        assert molgraph.graph_diameter(g) == int(dist.max())


def test_ring_count() -> None:
    assert molgraph.ring_count(graph('CCO')) == 0
    assert molgraph.ring_count(graph('C1CC1')) == 1
    assert molgraph.ring_count(graph('C1CC1C1CC1')) == 2
    assert molgraph.ring_count(graph('c1ccc2ccccc2c1')) == 2


def test_aromatic_ring_detection() -> None:
    assert molgraph.has_aromatic_ring(graph('c1ccccc1'))
    assert not molgraph.has_aromatic_ring(graph('C1CCCCC1'))
    assert len(molgraph.ring_bonds(graph('CC1CC1'))) == 3


def test_canonical_ranking_single_atom() -> None:
    assert molgraph.canonical_ranking(graph('C')) == [0]


def test_canonical_code_permutation_invariant(corpus_smiles) -> None:
    rng = np.random.default_rng(7)
    for trial in range(1000):
        g = graph(corpus_smiles[trial % len(corpus_smiles)])
        order = [int(i) for i in rng.permutation(len(g))]
        shuffled = molgraph.relabel(g, order)
        assert (molgraph.canonical_code(g, molgraph.canonical_ranking(g))
                == molgraph.canonical_code(shuffled, molgraph.canonical_ranking(shuffled)))


def test_canonical_code_distinguishes_isomers() -> None:
    a, b = graph('CCCC'), graph('CC(C)C')
    assert (molgraph.canonical_code(a, molgraph.canonical_ranking(a))
            != molgraph.canonical_code(b, molgraph.canonical_ranking(b)))


def test_atomic_mass_table() -> None:
    assert molgraph.atomic_mass('C') == pytest.approx(12.011)
    assert molgraph.atomic_mass('C', 13) == pytest.approx(13.003)
    assert molgraph.atomic_number('Cf') == 98
    assert len(molgraph.element_symbols()) == 98
