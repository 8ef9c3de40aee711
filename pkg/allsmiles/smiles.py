#!/usr/bin/env python3
"""
SMILES Reader and Writer
Tokenizer, recursive-descent parser, canonical writer, randomized multi-SMILES
enumeration with atom alignments, and string-edit similarity.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from allsmiles import molgraph
from allsmiles.errors import (RingBondMismatch, RingDigitsExhausted, SmilesSyntaxError,
                              UnclosedRing, UnknownCharacter, UnterminatedBracket)
from allsmiles.molgraph import Atom, Bond, BondOrder, MolecularGraph
from allsmiles.seeding import generator

ORGANIC_ATOMS = ('B', 'C', 'N', 'O', 'P', 'S', 'F', 'Cl', 'Br', 'I')
AROMATIC_ATOMS = ('b', 'c', 'n', 'o', 's', 'p')
BRACKET_AROMATIC = ('b', 'c', 'n', 'o', 'p', 's', 'se', 'as')
BOND_SYMBOLS = ('-', '=', '#', '$', ':', '/', '\\')
DIGITS = '0123456789'
CHIRAL_TOKENS = (
    ('@', '@@', '@TH1', '@TH2', '@AL1', '@AL2', '@SP1', '@SP2', '@SP3')
    + tuple(f'@TB{i}' for i in range(1, 31))
    + tuple(f'@OH{i}' for i in range(1, 31))
)
PAD = '<pad>'
EOS = '<eos>'

# Token kinds
ORGANIC_ATOM = 'organic_atom'
AROMATIC_ATOM = 'aromatic_atom'
BRACKET_ATOM = 'bracket_atom'
BOND = 'bond'
RING_DIGIT = 'ring_digit'
BRANCH_OPEN = 'branch_open'
BRANCH_CLOSE = 'branch_close'
END = 'eos'

ATOM_KINDS = (ORGANIC_ATOM, AROMATIC_ATOM, BRACKET_ATOM)

# Ring slots in the order the writer hands them out
RING_LABELS = tuple(str(d) for d in range(1, 10)) + ('0',) + tuple(f'%{d}' for d in range(10, 100))
_LABEL_RANK = {label: i for i, label in enumerate(RING_LABELS)}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int
    pieces: Tuple[str, ...] = ()
    atom: Optional[Atom] = None

    @property
    def is_atom(self) -> bool:
        return self.kind in ATOM_KINDS

    @property
    def ring_number(self) -> int:
        return int(self.text.lstrip('%'))


class Vocabulary:
    """Fixed symbol table shared by the tokenizer, the automaton and the model"""

    def __init__(self, symbols: Sequence[str]):
        self.symbols: List[str] = list(symbols)
        self.index: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError('vocabulary symbols must be unique')
        self.pad_id = self.index[PAD]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def encode(self, symbols: Iterable[str]) -> List[int]:
        return [self.index[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> str:
        """Join symbols up to the first eos, skipping padding"""
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i != self.pad_id:
                out.append(self.symbols[i])
        return ''.join(out)

    def to_list(self) -> List[str]:
        return list(self.symbols)

    @classmethod
    def from_list(cls, symbols: Sequence[str]) -> 'Vocabulary':
        return cls(symbols)

    @classmethod
    def default(cls) -> 'Vocabulary':
        return _default_vocabulary()


@lru_cache(maxsize=None)
def _default_vocabulary() -> Vocabulary:
    symbols: List[str] = [PAD, EOS]
    symbols += ORGANIC_ATOMS + AROMATIC_ATOMS + BOND_SYMBOLS + tuple(DIGITS)
    symbols += ['%', '(', ')', '[', ']', '+']
    symbols += [s for s in molgraph.element_symbols() if s not in symbols]
    symbols += ['se', 'as']
    symbols += CHIRAL_TOKENS
    return Vocabulary(symbols)


@dataclass(frozen=True)
class TokenStream:
    tokens: Tuple[Token, ...]
    symbols: Tuple[str, ...]
    vocabulary_ids: Tuple[int, ...]
    symbol_token: Tuple[int, ...]      # token index of every symbol
    atom_tokens: Tuple[int, ...]       # token indices of atom tokens, in order
    atom_symbols: Tuple[int, ...]      # symbol index carrying each atom's element

    @property
    def text(self) -> str:
        return detokenize(self)

    def __len__(self) -> int:
        return len(self.vocabulary_ids)


@dataclass(frozen=True)
class AtomAlignment:
    """Atom-token index in the stream -> atom index in the graph"""
    mapping: Dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mapping)


@dataclass(frozen=True)
class ParseResult:
    graph: MolecularGraph
    alignment: AtomAlignment
    stream: TokenStream


# Tokenizer

def _parse_bracket(s: str, start: int) -> Tuple[int, Tuple[str, ...], Atom]:
    """Parse `[...]` starting at s[start] == '['; return (end, pieces, atom)"""
    end = s.find(']', start + 1)
    if end < 0:
        raise UnterminatedBracket(start)
    body = s[start + 1:end]
    pieces: List[str] = ['[']
    j = 0

    def fail(expected: Iterable[str]) -> SmilesSyntaxError:
        return SmilesSyntaxError(start + 1 + j, expected)

    iso = ''
    while j < len(body) and body[j].isdigit() and len(iso) < 3:
        iso += body[j]
        j += 1
    pieces.extend(iso)

    symbol = None
    two = body[j:j + 2]
    if len(two) == 2 and (two in BRACKET_AROMATIC or (two[0].isupper() and molgraph.is_element(two))):
        symbol = two
    elif body[j:j + 1] and (body[j] in BRACKET_AROMATIC or (body[j].isupper() and molgraph.is_element(body[j]))):
        symbol = body[j]
    if symbol is None:
        raise fail(['symbol'])
    j += len(symbol)
    pieces.append(symbol)

    chirality = None
    if body[j:j + 1] == '@':
        for length in (5, 4, 2, 1):
            if body[j:j + length] in CHIRAL_TOKENS:
                chirality = body[j:j + length]
                break
        j += len(chirality)
        pieces.append(chirality)

    hcount = 0
    if body[j:j + 1] == 'H':
        pieces.append('H')
        j += 1
        hcount = 1
        if body[j:j + 1].isdigit():
            hcount = int(body[j])
            pieces.append(body[j])
            j += 1

    charge = 0
    if body[j:j + 1] in ('+', '-'):
        sign = 1 if body[j] == '+' else -1
        pieces.append(body[j])
        j += 1
        magnitude = 1
        if body[j:j + 1].isdigit():
            magnitude = int(body[j])
            pieces.append(body[j])
            j += 1
        charge = sign * magnitude

    atom_class = None
    if body[j:j + 1] == ':':
        pieces.append(':')
        j += 1
        digits = ''
        while j < len(body) and body[j].isdigit() and len(digits) < 3:
            digits += body[j]
            j += 1
        pieces.extend(digits)
        atom_class = int(digits) if digits else None

    if j != len(body):
        raise fail([']'])
    pieces.append(']')

    aromatic = symbol[0].islower()
    element = symbol.capitalize() if aromatic else symbol
    atom = Atom(element=element, aromatic=aromatic, isotope=int(iso) if iso else None,
                charge=charge, explicit_h=hcount, chirality=chirality, atom_class=atom_class)
    return end + 1, tuple(pieces), atom


def _tokens(s: str) -> List[Token]:
    tokens: List[Token] = []
    i = 0
    while i < len(s):
        ch = s[i]
        two = s[i:i + 2]
        if two in ('Cl', 'Br'):
            tokens.append(Token(ORGANIC_ATOM, two, i, (two,), Atom(two)))
            i += 2
        elif ch in ORGANIC_ATOMS:
            tokens.append(Token(ORGANIC_ATOM, ch, i, (ch,), Atom(ch)))
            i += 1
        elif ch in AROMATIC_ATOMS:
            tokens.append(Token(AROMATIC_ATOM, ch, i, (ch,), Atom(ch.upper(), aromatic=True)))
            i += 1
        elif ch == '[':
            end, pieces, atom = _parse_bracket(s, i)
            tokens.append(Token(BRACKET_ATOM, s[i:end], i, pieces, atom))
            i = end
        elif ch in BOND_SYMBOLS:
            tokens.append(Token(BOND, ch, i, (ch,)))
            i += 1
        elif ch in DIGITS:
            tokens.append(Token(RING_DIGIT, ch, i, (ch,)))
            i += 1
        elif ch == '%':
            digits = s[i + 1:i + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise SmilesSyntaxError(i + 1, ['digit'])
            tokens.append(Token(RING_DIGIT, s[i:i + 3], i, ('%', digits[0], digits[1])))
            i += 3
        elif ch == '(':
            tokens.append(Token(BRANCH_OPEN, ch, i, (ch,)))
            i += 1
        elif ch == ')':
            tokens.append(Token(BRANCH_CLOSE, ch, i, (ch,)))
            i += 1
        else:
            raise UnknownCharacter(i, ch)
    tokens.append(Token(END, '', len(s), (EOS,)))
    return tokens


def tokenize(s: str, vocab: Optional[Vocabulary] = None) -> TokenStream:
    """Maximal-munch tokenization; bracket atoms stay single tokens"""
    vocab = vocab or Vocabulary.default()
    tokens = _tokens(s)
    symbols: List[str] = []
    symbol_token: List[int] = []
    atom_tokens: List[int] = []
    atom_symbols: List[int] = []
    for index, token in enumerate(tokens):
        if token.is_atom:
            atom_tokens.append(index)
            # the element piece: first non-digit after '[' for brackets
            offset = 0
            if token.kind == BRACKET_ATOM:
                offset = 1
                while token.pieces[offset].isdigit():
                    offset += 1
            atom_symbols.append(len(symbols) + offset)
        for piece in token.pieces:
            symbols.append(piece)
            symbol_token.append(index)
    return TokenStream(
        tokens=tuple(tokens),
        symbols=tuple(symbols),
        vocabulary_ids=tuple(vocab.encode(symbols)),
        symbol_token=tuple(symbol_token),
        atom_tokens=tuple(atom_tokens),
        atom_symbols=tuple(atom_symbols),
    )


def detokenize(stream: TokenStream) -> str:
    return ''.join(t.text for t in stream.tokens if t.kind != END)


# Parser

def _default_order(a: Atom, b: Atom) -> BondOrder:
    return BondOrder.AROMATIC if a.aromatic and b.aromatic else BondOrder.SINGLE


class _Parser:
    """Recursive descent over the chain / branched_atom / branch productions"""

    def __init__(self, stream: TokenStream):
        self.tokens = stream.tokens
        self.pos = 0
        self.atoms: List[Atom] = []
        self.bonds: List[Bond] = []
        self.open_rings: Dict[int, Tuple[int, str]] = {}

    def peek(self, offset: int = 0) -> Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def take(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def error(self, expected: Iterable[str]) -> SmilesSyntaxError:
        return SmilesSyntaxError(self.peek().position, expected)

    def run(self) -> None:
        self.chain(None, None)
        if self.peek().kind != END:
            raise self.error(['end'])
        if self.open_rings:
            raise UnclosedRing(min(self.open_rings))

    def chain(self, prev: Optional[int], bond: Optional[Token]) -> None:
        while True:
            token = self.peek()
            if not token.is_atom:
                raise self.error(['atom'])
            self.take()
            current = len(self.atoms)
            self.atoms.append(token.atom)
            if prev is not None:
                self.connect(prev, current, bond.text if bond else '')

            self.ringbonds(current)

            while self.peek().kind == BRANCH_OPEN:
                self.take()
                branch_bond = self.take() if self.peek().kind == BOND else None
                self.chain(current, branch_bond)
                if self.peek().kind != BRANCH_CLOSE:
                    raise self.error([')', 'bond', 'atom', '('])
                self.take()

            nxt = self.peek()
            if nxt.kind == BOND:
                bond = self.take()
                if not self.peek().is_atom:
                    raise self.error(['atom'])
            elif nxt.is_atom:
                bond = None
            else:
                return
            prev = current

    def ringbonds(self, atom: int) -> None:
        while True:
            token = self.peek()
            if token.kind == RING_DIGIT:
                label = ''
            elif token.kind == BOND and self.peek(1).kind == RING_DIGIT:
                label = self.take().text
                token = self.peek()
            else:
                return
            self.take()
            number = token.ring_number
            if number in self.open_rings:
                opener, opened_label = self.open_rings.pop(number)
                if opened_label != label:
                    raise RingBondMismatch(number, opened_label, label)
                self.connect(opener, atom, label)
            else:
                self.open_rings[number] = (atom, label)

    def connect(self, a: int, b: int, label: str) -> None:
        order = BondOrder.from_symbol(label) if label else _default_order(self.atoms[a], self.atoms[b])
        self.bonds.append(Bond(a, b, order))


def parse(s: str, vocab: Optional[Vocabulary] = None) -> ParseResult:
    stream = tokenize(s, vocab)
    parser = _Parser(stream)
    parser.run()
    graph = molgraph.build_graph(parser.atoms, parser.bonds)
    alignment = AtomAlignment({token: atom for atom, token in enumerate(stream.atom_tokens)})
    return ParseResult(graph=graph, alignment=alignment, stream=stream)


# Writer

def atom_text(atom: Atom) -> str:
    organic = (atom.explicit_h is None and atom.charge == 0 and atom.isotope is None
               and atom.chirality is None and atom.atom_class is None
               and atom.element in ORGANIC_ATOMS
               and (not atom.aromatic or atom.element.lower() in AROMATIC_ATOMS))
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if organic:
        return symbol

    text = '[' + (str(atom.isotope) if atom.isotope is not None else '') + symbol
    text += atom.chirality or ''
    hydrogens = atom.explicit_h if atom.explicit_h is not None else 0
    if hydrogens:
        text += 'H' + (str(hydrogens) if hydrogens > 1 else '')
    if atom.charge:
        text += '+' if atom.charge > 0 else '-'
        if abs(atom.charge) > 1:
            text += str(abs(atom.charge))
    if atom.atom_class is not None:
        text += f':{atom.atom_class}'
    return text + ']'


def _bond_text(g: MolecularGraph, bond: Bond) -> str:
    if bond.order == _default_order(g.atoms[bond.a], g.atoms[bond.b]):
        return ''
    return bond.order.symbol


def _flatten(g: MolecularGraph, root: int,
             neighbor_order: Callable[[int, List[Tuple[int, int]]], List[Tuple[int, int]]]
             ) -> Tuple[str, List[int]]:
    """DFS-flatten g from root; return (SMILES, atoms in emission order)"""
    n = len(g.atoms)
    visit = [-1] * n
    parent_bond = [-1] * n
    children: List[List[int]] = [[] for _ in range(n)]
    closures: List[List[Tuple[int, int]]] = [[] for _ in range(n)]   # (other atom, bond)
    used = set()

    visit[root] = 0
    counter = 1
    stack = [(root, iter(neighbor_order(root, list(g.adjacency[root]))))]
    while stack:
        atom, neighbors = stack[-1]
        descended = False
        for other, bond in neighbors:
            if bond in used:
                continue
            used.add(bond)
            if visit[other] < 0:
                visit[other] = counter
                counter += 1
                parent_bond[other] = bond
                children[atom].append(other)
                stack.append((other, iter(neighbor_order(other, list(g.adjacency[other])))))
                descended = True
                break
            closures[atom].append((other, bond))
            closures[other].append((atom, bond))
        if not descended:
            stack.pop()

    free = list(RING_LABELS)
    assigned: Dict[int, str] = {}
    out: List[str] = []
    emission: List[int] = []

    def emit(atom: int) -> None:
        while True:
            if parent_bond[atom] >= 0:
                out.append(_bond_text(g, g.bonds[parent_bond[atom]]))
            out.append(atom_text(g.atoms[atom]))
            emission.append(atom)

            released = []
            for other, bond in sorted(closures[atom], key=lambda c: visit[c[0]]):
                text = _bond_text(g, g.bonds[bond])
                if bond in assigned:
                    label = assigned.pop(bond)
                    released.append(label)
                else:
                    if not free:
                        raise RingDigitsExhausted(len(assigned) + 1)
                    label = free.pop(0)
                    assigned[bond] = label
                out.append(text + label)
            if released:
                free.extend(released)
                free.sort(key=_LABEL_RANK.__getitem__)

            kids = children[atom]
            for child in kids[:-1]:
                out.append('(')
                emit(child)
                out.append(')')
            if not kids:
                return
            atom = kids[-1]

    emit(root)
    return ''.join(out), emission


def write_canonical(g: MolecularGraph) -> str:
    ranks = molgraph.canonical_ranking(g)
    root = ranks.index(0)
    return _flatten(g, root, lambda atom, nbrs: sorted(nbrs, key=lambda nb: ranks[nb[0]]))[0]


def canonical_smiles(s: str) -> str:
    return write_canonical(parse(s).graph)


def same_molecule(s1: str, s2: str) -> bool:
    return canonical_smiles(s1) == canonical_smiles(s2)


# Enumeration

def _random_flatten(g: MolecularGraph, rng: np.random.Generator) -> Tuple[str, List[int]]:
    root = int(rng.integers(len(g.atoms)))

    def shuffled(atom: int, nbrs: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        return [nbrs[i] for i in rng.permutation(len(nbrs))]

    return _flatten(g, root, shuffled)


def _aligned(s: str, emission: List[int]) -> Tuple[str, AtomAlignment]:
    stream = tokenize(s)
    return s, AtomAlignment(dict(zip(stream.atom_tokens, emission)))


def enumerate_random(g: MolecularGraph, seed: int, k: int,
                     max_tries: int = 10_000, patience: int = 1_000) -> List[Tuple[str, AtomAlignment]]:
    """k random DFS flattenings of g, distinct while the molecule allows it"""
    if k < 1:
        raise ValueError('k must be at least 1')
    rng = generator(seed)
    distinct: Dict[str, List[int]] = {}
    tries = misses = 0
    while len(distinct) < k and tries < max_tries and misses < patience:
        s, emission = _random_flatten(g, rng)
        tries += 1
        if s in distinct:
            misses += 1
            continue
        misses = 0
        distinct[s] = emission

    samples = [_aligned(s, emission) for s, emission in distinct.items()]
    while len(samples) < k:
        samples.append(_aligned(*_random_flatten(g, rng)))
    return samples


def edit_similarity(s1: str, s2: str) -> float:
    """1 - Levenshtein(s1, s2) / max(len)"""
    if s1 == s2:
        return 1.0
    longest = max(len(s1), len(s2))
    previous = list(range(len(s2) + 1))
    for i, a in enumerate(s1, 1):
        current = [i]
        for j, b in enumerate(s2, 1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (a != b)))
        previous = current
    return 1.0 - previous[-1] / longest
