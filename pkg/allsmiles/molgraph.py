#!/usr/bin/env python3
"""
Molecular Graph
Atoms, bonds, valence bookkeeping, exact scalar properties and canonical ranking.
"""

from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from allsmiles import settings
from allsmiles.errors import DisconnectedGraph, DuplicateBond, ValenceExceeded

HYDROGEN_MASS = 1.008

# Allowed valences per element; elements missing here are unbounded.
VALENCES: Dict[str, Tuple[int, ...]] = {
    'H': (1,),
    'B': (3,),
    'C': (4,),
    'N': (3, 5),
    'O': (2,),
    'P': (3, 5),
    'S': (2, 4, 6),
    'F': (1,),
    'Cl': (1,),
    'Br': (1,),
    'I': (1,),
}

ORGANIC_SUBSET = ('B', 'C', 'N', 'O', 'P', 'S', 'F', 'Cl', 'Br', 'I')
AROMATIC_ELEMENTS = frozenset({'B', 'C', 'N', 'O', 'P', 'S', 'Se', 'As'})

# Leaves cap for the tie-breaking search in canonical ranking.
MAX_CANONICAL_LEAVES = 720


class BondOrder(Enum):
    SINGLE = '-'
    DOUBLE = '='
    TRIPLE = '#'
    QUADRUPLE = '$'
    AROMATIC = ':'
    UP = '/'
    DOWN = '\\'

    @property
    def valence(self) -> int:
        return _BOND_VALENCE[self]

    @property
    def symbol(self) -> str:
        return self.value

    @classmethod
    def from_symbol(cls, symbol: str) -> 'BondOrder':
        return cls(symbol)


_BOND_VALENCE = {
    BondOrder.SINGLE: 1,
    BondOrder.DOUBLE: 2,
    BondOrder.TRIPLE: 3,
    BondOrder.QUADRUPLE: 4,
    BondOrder.AROMATIC: 1,
    BondOrder.UP: 1,
    BondOrder.DOWN: 1,
}
_BOND_CODE = {order: i for i, order in enumerate(BondOrder)}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    isotope: Optional[int] = None
    charge: int = 0
    explicit_h: Optional[int] = None
    chirality: Optional[str] = None
    atom_class: Optional[int] = None

    @property
    def bracket(self) -> bool:
        return self.explicit_h is not None

    def label(self) -> Tuple:
        """Comparable tuple of every atom attribute"""
        return (
            atomic_number(self.element),
            int(self.aromatic),
            self.isotope if self.isotope is not None else -1,
            self.charge,
            self.explicit_h if self.explicit_h is not None else -1,
            self.chirality or '',
            self.atom_class if self.atom_class is not None else -1,
        )


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE

    def other(self, atom: int) -> int:
        return self.b if atom == self.a else self.a


class MolecularGraph:
    """Connected, valence-checked molecule; build it through build_graph"""

    __slots__ = ('atoms', 'bonds', 'adjacency')

    def __init__(self, atoms: Sequence[Atom], bonds: Sequence[Bond]):
        self.atoms: Tuple[Atom, ...] = tuple(atoms)
        self.bonds: Tuple[Bond, ...] = tuple(bonds)
        adjacency: List[List[Tuple[int, int]]] = [[] for _ in self.atoms]
        for index, bond in enumerate(self.bonds):
            adjacency[bond.a].append((bond.b, index))
            adjacency[bond.b].append((bond.a, index))
        self.adjacency: Tuple[Tuple[Tuple[int, int], ...], ...] = tuple(tuple(n) for n in adjacency)

    def __len__(self) -> int:
        return len(self.atoms)

    def __repr__(self) -> str:
        return f'MolecularGraph(atoms={len(self.atoms)}, bonds={len(self.bonds)})'

    def neighbors(self, atom: int) -> List[int]:
        return [n for n, _ in self.adjacency[atom]]

    def degree(self, atom: int) -> int:
        return len(self.adjacency[atom])

    def bond_order_sum(self, atom: int) -> int:
        return sum(self.bonds[index].order.valence for _, index in self.adjacency[atom])


# Periodic table

@lru_cache(maxsize=None)
def _periodic_table() -> Dict[str, Tuple[int, float]]:
    frame = pd.read_csv(settings.data_dir() / 'elements.tsv', sep='\t', header=None,
                        names=['symbol', 'atomic_number', 'mass'], comment='#')
    return {row.symbol: (int(row.atomic_number), float(row.mass)) for row in frame.itertuples()}


@lru_cache(maxsize=None)
def _isotope_table() -> Dict[Tuple[str, int], float]:
    frame = pd.read_csv(settings.data_dir() / 'isotopes.tsv', sep='\t', header=None,
                        names=['symbol', 'mass_number', 'mass'], comment='#')
    return {(row.symbol, int(row.mass_number)): float(row.mass) for row in frame.itertuples()}


def element_symbols() -> List[str]:
    """Bundled element symbols ordered by atomic number"""
    table = _periodic_table()
    return sorted(table, key=lambda s: table[s][0])


def is_element(symbol: str) -> bool:
    return symbol in _periodic_table()


def atomic_number(symbol: str) -> int:
    return _periodic_table()[symbol][0]


def atomic_mass(symbol: str, isotope: Optional[int] = None) -> float:
    if isotope is not None:
        return _isotope_table().get((symbol, isotope), float(isotope))
    return _periodic_table()[symbol][1]


# Valence bookkeeping

def valence_bound(atom: Atom) -> Optional[int]:
    """Largest bond-order sum (explicit H included) the atom tolerates; None = unbounded"""
    allowed = VALENCES.get(atom.element)
    if allowed is None:
        return None
    return min(allowed) if atom.aromatic else max(allowed)


def implicit_hydrogens(atom: Atom, bond_order_sum: int) -> int:
    if atom.explicit_h is not None:
        return atom.explicit_h
    allowed = VALENCES.get(atom.element)
    if atom.element not in ORGANIC_SUBSET or allowed is None:
        return 0
    if atom.aromatic:
        # one unit belongs to the aromatic system
        return max(0, min(allowed) - bond_order_sum - 1)
    for valence in allowed:
        if valence >= bond_order_sum:
            return int(valence - bond_order_sum)
    return 0


def build_graph(atoms: Sequence[Atom], bonds: Sequence[Bond]) -> MolecularGraph:
    """Validate and assemble a molecule"""
    n = len(atoms)
    seen = set()
    for bond in bonds:
        if not (0 <= bond.a < n and 0 <= bond.b < n):
            raise IndexError(f'bond {bond} refers to a missing atom')
        pair = (min(bond.a, bond.b), max(bond.a, bond.b))
        if bond.a == bond.b or pair in seen:
            raise DuplicateBond(*pair)
        seen.add(pair)

    graph = MolecularGraph(atoms, bonds)
    components = _component_count(graph)
    if components > 1:
        raise DisconnectedGraph(components)

    for index, atom in enumerate(graph.atoms):
        bound = valence_bound(atom)
        used = graph.bond_order_sum(index) + (atom.explicit_h or 0)
        if bound is not None and used > bound:
            raise ValenceExceeded(index, used, bound)
    return graph


def _component_count(g: MolecularGraph) -> int:
    seen = [False] * len(g.atoms)
    components = 0
    for start in range(len(g.atoms)):
        if seen[start]:
            continue
        components += 1
        seen[start] = True
        queue = deque([start])
        while queue:
            atom = queue.popleft()
            for neighbor, _ in g.adjacency[atom]:
                if not seen[neighbor]:
                    seen[neighbor] = True
                    queue.append(neighbor)
    return components


def relabel(g: MolecularGraph, order: Sequence[int]) -> MolecularGraph:
    """Graph whose atom i is g's atom order[i]"""
    position = {old: new for new, old in enumerate(order)}
    atoms = [g.atoms[old] for old in order]
    bonds = [Bond(position[b.a], position[b.b], b.order) for b in g.bonds]
    return MolecularGraph(atoms, bonds)


# Scalar properties

def hydrogen_count(g: MolecularGraph) -> int:
    return sum(implicit_hydrogens(atom, g.bond_order_sum(i)) for i, atom in enumerate(g.atoms))


def molecular_weight(g: MolecularGraph) -> float:
    mass = sum(atomic_mass(atom.element, atom.isotope) for atom in g.atoms)
    return mass + HYDROGEN_MASS * hydrogen_count(g)


def formula(g: MolecularGraph) -> str:
    """Hill-order formula, e.g. C2H6O"""
    counts: Dict[str, int] = {}
    for atom in g.atoms:
        counts[atom.element] = counts.get(atom.element, 0) + 1
    hydrogens = hydrogen_count(g)
    if hydrogens:
        counts['H'] = counts.get('H', 0) + hydrogens

    if 'C' in counts:
        order = ['C'] + (['H'] if 'H' in counts else [])
        order += sorted(s for s in counts if s not in ('C', 'H'))
    else:
        order = sorted(counts)
    return ''.join(s + (str(counts[s]) if counts[s] > 1 else '') for s in order)


def _bfs_distances(g: MolecularGraph, source: int) -> List[int]:
    distances = [-1] * len(g.atoms)
    distances[source] = 0
    queue = deque([source])
    while queue:
        atom = queue.popleft()
        for neighbor, _ in g.adjacency[atom]:
            if distances[neighbor] < 0:
                distances[neighbor] = distances[atom] + 1
                queue.append(neighbor)
    return distances


def graph_diameter(g: MolecularGraph) -> int:
    return max((max(_bfs_distances(g, atom)) for atom in range(len(g.atoms))), default=0)


def ring_count(g: MolecularGraph) -> int:
    return len(g.bonds) - len(g.atoms) + 1


def ring_bonds(g: MolecularGraph) -> frozenset:
    """Indices of bonds lying on a cycle (every bond that is not a bridge)"""
    n = len(g.atoms)
    if n == 0:
        return frozenset()
    discovery = [-1] * n
    low = [0] * n
    bridges = set()
    timer = 0
    for root in range(n):
        if discovery[root] >= 0:
            continue
        discovery[root] = low[root] = timer
        timer += 1
        # iterative DFS: (atom, parent bond, neighbor iterator)
        stack = [(root, -1, iter(g.adjacency[root]))]
        while stack:
            atom, parent_bond, neighbors = stack[-1]
            advanced = False
            for neighbor, bond in neighbors:
                if bond == parent_bond:
                    continue
                if discovery[neighbor] < 0:
                    discovery[neighbor] = low[neighbor] = timer
                    timer += 1
                    stack.append((neighbor, bond, iter(g.adjacency[neighbor])))
                    advanced = True
                    break
                low[atom] = min(low[atom], discovery[neighbor])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[atom])
                if low[atom] > discovery[parent]:
                    bridges.add(parent_bond)
    return frozenset(i for i in range(len(g.bonds)) if i not in bridges)


def has_aromatic_ring(g: MolecularGraph) -> bool:
    cyclic = ring_bonds(g)
    for index in cyclic:
        bond = g.bonds[index]
        if g.atoms[bond.a].aromatic and g.atoms[bond.b].aromatic:
            return True
    return False


# Canonical ranking

def _dense_ranks(keys: Sequence) -> List[int]:
    ordered = sorted(set(keys))
    index = {key: rank for rank, key in enumerate(ordered)}
    return [index[key] for key in keys]


def _refine(g: MolecularGraph, colors: List[int]) -> List[int]:
    count = len(set(colors))
    while True:
        keys = [
            (colors[atom], tuple(sorted((colors[n], _BOND_CODE[g.bonds[b].order])
                                        for n, b in g.adjacency[atom])))
            for atom in range(len(g.atoms))
        ]
        colors = _dense_ranks(keys)
        refined = len(set(colors))
        if refined == count:
            return colors
        count = refined


def canonical_code(g: MolecularGraph, ranks: Sequence[int]) -> Tuple:
    """Relabelled graph as a comparable tuple; equal codes mean identical molecules"""
    by_rank = sorted(range(len(g.atoms)), key=lambda atom: ranks[atom])
    labels = tuple(g.atoms[atom].label() for atom in by_rank)
    edges = tuple(sorted(
        (min(ranks[b.a], ranks[b.b]), max(ranks[b.a], ranks[b.b]), _BOND_CODE[b.order])
        for b in g.bonds
    ))
    return labels, edges


def canonical_ranking(g: MolecularGraph) -> List[int]:
    """Canonical rank of every atom (ranks[atom] in 0..n-1)

    Colours start from the atom label plus degree and are refined by sorted
    neighbour colours. Remaining ties are broken by individualising each member
    of the first tied cell in turn; the discrete colouring with the smallest
    canonical code wins, so symmetric choices cannot change the result.
    """
    n = len(g.atoms)
    if n == 0:
        return []
    initial = _dense_ranks([g.atoms[atom].label() + (g.degree(atom),) for atom in range(n)])

    best_code = None
    best_ranks: List[int] = []
    leaves = 0
    stack = [_refine(g, initial)]
    while stack:
        colors = stack.pop()
        if len(set(colors)) == n:
            leaves += 1
            code = canonical_code(g, colors)
            if best_code is None or code < best_code:
                best_code, best_ranks = code, colors
            if leaves >= MAX_CANONICAL_LEAVES:
                break
            continue
        cell_color = min(c for c in set(colors) if colors.count(c) > 1)
        members = [atom for atom in range(n) if colors[atom] == cell_color]
        # reversed so the smallest index is explored first
        for chosen in reversed(members):
            keys = [(colors[atom], 0 if atom == chosen else 1) for atom in range(n)]
            stack.append(_refine(g, _dense_ranks(keys)))
    return best_ranks
