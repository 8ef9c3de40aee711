#!/usr/bin/env python3
"""
SMILES Pushdown Automaton
Tracks a generation prefix symbol by symbol and yields the exact set of legal
next symbols: grammar position, branch/bracket stack, 100-slot ring memory with
bond-label matching, and per-atom valence budgets.
"""

from dataclasses import dataclass, replace
from typing import FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from allsmiles import molgraph
from allsmiles.errors import IllegalToken
from allsmiles.molgraph import Atom, BondOrder
from allsmiles.seeding import generator
from allsmiles.smiles import (AROMATIC_ATOMS, BOND_SYMBOLS, BRACKET_AROMATIC, CHIRAL_TOKENS,
                              DIGITS, EOS, ORGANIC_ATOMS, Vocabulary, tokenize)

RING_SLOTS = 100
INF = float('inf')

# Control states
START = 'start'                 # first atom of the string
BRANCH = 'branch'               # after '(': bond or atom
BOND_ATOM = 'bond_atom'         # after a chain bond: atom
RING_BOND = 'ring_bond'         # after a bond in the ringbond phase: ring number or atom
ATOM = 'atom'                   # after an atom: ringbonds, branches, rest of chain
BRANCHED = 'branched'           # after ')': more branches or rest of chain
PERCENT = 'percent'
PERCENT_DIGIT = 'percent_digit'
DONE = 'done'
BR_OPEN = 'br_open'
BR_ISO1 = 'br_iso1'
BR_ISO2 = 'br_iso2'
BR_ISO3 = 'br_iso3'
BR_SYMBOL = 'br_symbol'
BR_CHIRAL = 'br_chiral'
BR_H = 'br_h'
BR_HCOUNT = 'br_hcount'
BR_SIGN = 'br_sign'
BR_CHARGE = 'br_charge'
BR_CLASS0 = 'br_class0'
BR_CLASS1 = 'br_class1'
BR_CLASS2 = 'br_class2'
BR_CLASS3 = 'br_class3'

ATOM_EXPECTED = (START, BRANCH, BOND_ATOM, RING_BOND, ATOM, BRANCHED)
AFTER_SYMBOL = (BR_SYMBOL, BR_CHIRAL, BR_H, BR_HCOUNT, BR_SIGN, BR_CHARGE,
                BR_CLASS0, BR_CLASS1, BR_CLASS2, BR_CLASS3)
CAPACITY_CONTROLS = (ATOM, BRANCHED) + AFTER_SYMBOL
CLASS_NEXT = {BR_CLASS0: BR_CLASS1, BR_CLASS1: BR_CLASS2, BR_CLASS2: BR_CLASS3}
ISO_NEXT = {BR_OPEN: BR_ISO1, BR_ISO1: BR_ISO2, BR_ISO2: BR_ISO3}
CHARGE_FROM = (BR_SYMBOL, BR_CHIRAL, BR_H, BR_HCOUNT)
CLASS_FROM = (BR_SYMBOL, BR_CHIRAL, BR_H, BR_HCOUNT, BR_SIGN, BR_CHARGE)


@dataclass(frozen=True)
class AtomRecord:
    id: int
    element: str
    aromatic: bool
    used: int
    budget: Optional[int]
    neighbors: FrozenSet[int] = frozenset()

    @property
    def remaining(self) -> float:
        return INF if self.budget is None else self.budget - self.used

    def charged(self, order: int, partner: Optional[int] = None) -> 'AtomRecord':
        neighbors = self.neighbors if partner is None else self.neighbors | {partner}
        return replace(self, used=self.used + order, neighbors=neighbors)


@dataclass(frozen=True)
class RingSlot:
    label: str
    opener: int
    pending: int


@dataclass(frozen=True)
class Frame:
    symbol: str
    atom: Optional[AtomRecord] = None


@dataclass(frozen=True)
class BracketDraft:
    id: int
    incoming: int
    anchor: Optional[int]
    symbol: Optional[str] = None
    aromatic: bool = False
    budget: Optional[int] = None
    hcount: int = 0

    @property
    def used(self) -> int:
        return self.incoming + self.hcount

    @property
    def remaining(self) -> float:
        return INF if self.budget is None else self.budget - self.used


@dataclass(frozen=True)
class PdaState:
    control: str = START
    stack: Tuple[Frame, ...] = ()
    rings: Tuple[Optional[RingSlot], ...] = (None,) * RING_SLOTS
    current: Optional[AtomRecord] = None
    pending_bond: str = ''
    ring_digit: int = 0
    draft: Optional[BracketDraft] = None
    atom_count: int = 0
    length: int = 0

    @property
    def open_ring_count(self) -> int:
        return sum(1 for slot in self.rings if slot is not None)

    @property
    def ring_bits(self) -> Tuple[bool, ...]:
        return tuple(slot is not None for slot in self.rings)

    def summary(self) -> str:
        atom = self.current.element if self.current else '-'
        depth = ''.join(frame.symbol for frame in self.stack)
        return f'{self.control}[atom={atom},stack={depth or "-"},rings={self.open_ring_count}]'


def _bond_valence(label: str) -> int:
    return BondOrder.from_symbol(label).valence if label else 1


def initial_state() -> PdaState:
    return PdaState()


# Transitions

def _anchor(state: PdaState) -> Optional[AtomRecord]:
    if state.current is not None:
        return state.current
    if state.stack and state.stack[-1].symbol == '(':
        return state.stack[-1].atom
    return None


def _with_anchor(state: PdaState, anchor: AtomRecord) -> PdaState:
    """Store an updated anchor wherever it lives"""
    if state.current is not None:
        return replace(state, current=anchor)
    top = state.stack[-1]
    return replace(state, stack=state.stack[:-1] + (Frame(top.symbol, anchor),))


def _has_capacity(state: PdaState) -> bool:
    if state.draft is not None and state.draft.symbol is not None:
        if state.draft.remaining >= 1:
            return True
    elif state.current is not None and state.current.remaining >= 1:
        return True
    return any(f.symbol == '(' and f.atom.remaining >= 1 for f in state.stack)


def _is_dead_end(state: PdaState) -> bool:
    """Open rings remain but no reachable atom can form another bond"""
    return (state.control in CAPACITY_CONTROLS and state.open_ring_count > 0
            and not _has_capacity(state))


def _attach(state: PdaState, order_if_anchor: int) -> Tuple[PdaState, Optional[AtomRecord], int]:
    """Charge the anchor for an incoming bond; returns (state, anchor, order)"""
    anchor = _anchor(state)
    if anchor is None:
        return state, None, 0
    if anchor.remaining < order_if_anchor:
        raise ValueError('anchor valence exhausted')
    charged = anchor.charged(order_if_anchor)
    return _with_anchor(state, charged), charged, order_if_anchor


def _new_atom(state: PdaState, element: str, aromatic: bool) -> PdaState:
    order = _bond_valence(state.pending_bond)
    state, anchor, order = _attach(state, order)
    budget = molgraph.valence_bound(Atom(element, aromatic=aromatic))
    if budget is not None and order > budget:
        raise ValueError('atom valence exceeded')
    record = AtomRecord(state.atom_count, element, aromatic, order, budget,
                        frozenset({anchor.id}) if anchor else frozenset())
    return replace(state, control=ATOM, current=record, pending_bond='',
                   atom_count=state.atom_count + 1)


def _ring(state: PdaState, number: int, label: str) -> PdaState:
    atom = state.current
    slot = state.rings[number]
    order = _bond_valence(label)
    if slot is not None:
        if slot.label != label:
            raise ValueError('ring bond label mismatch')
        if slot.opener == atom.id or slot.opener in atom.neighbors:
            raise ValueError('duplicate bond')
        if atom.remaining < slot.pending:
            raise ValueError('valence exceeded')
        atom = atom.charged(slot.pending, slot.opener)
        new_slot = None
    else:
        if atom.remaining < order:
            raise ValueError('valence exceeded')
        atom = atom.charged(order)
        new_slot = RingSlot(label, atom.id, order)
    rings = state.rings[:number] + (new_slot,) + state.rings[number + 1:]
    return replace(state, control=ATOM, current=atom, rings=rings, pending_bond='', ring_digit=0)


def _ring_possible(state: PdaState, numbers: Iterable[int]) -> bool:
    for number in numbers:
        try:
            if not _is_dead_end(_ring(state, number, state.pending_bond)):
                return True
        except ValueError:
            continue
    return False


def _bracket_symbol_ok(symbol: str) -> bool:
    if symbol in BRACKET_AROMATIC:
        return True
    return symbol[:1].isupper() and molgraph.is_element(symbol)


def _step(state: PdaState, symbol: str) -> PdaState:
    """One transition; raises ValueError when the symbol is illegal"""
    c = state.control
    grow = 0 if symbol == EOS else 1
    nxt = _transition(state, c, symbol)
    nxt = replace(nxt, length=state.length + grow)
    if _is_dead_end(nxt):
        raise ValueError('dead end')
    return nxt


def _transition(state: PdaState, c: str, symbol: str) -> PdaState:
    if c == DONE:
        raise ValueError('string finished')

    # atoms
    if c in ATOM_EXPECTED and (symbol in ORGANIC_ATOMS or symbol in AROMATIC_ATOMS):
        aromatic = symbol in AROMATIC_ATOMS
        return _new_atom(state, symbol.upper() if aromatic else symbol, aromatic)
    if c in ATOM_EXPECTED and symbol == '[':
        state, anchor, order = _attach(state, _bond_valence(state.pending_bond))
        draft = BracketDraft(state.atom_count, order, anchor.id if anchor else None)
        return replace(state, control=BR_OPEN, stack=state.stack + (Frame('['),), current=None,
                       draft=draft, pending_bond='', atom_count=state.atom_count + 1)

    # bonds
    if symbol in BOND_SYMBOLS and c in (ATOM, BRANCHED, BRANCH):
        anchor = _anchor(state)
        if anchor.remaining < _bond_valence(symbol):
            raise ValueError('valence exceeded')
        control = RING_BOND if c == ATOM else BOND_ATOM
        return replace(state, control=control, pending_bond=symbol)

    # ring closures
    if c in (ATOM, RING_BOND):
        label = state.pending_bond if c == RING_BOND else ''
        if symbol in DIGITS:
            return _ring(replace(state, pending_bond=label), int(symbol), label)
        if symbol == '%':
            bonded = replace(state, pending_bond=label)
            if not _ring_possible(bonded, range(RING_SLOTS)):
                raise ValueError('no ring number available')
            return replace(bonded, control=PERCENT)
    if c == PERCENT and symbol in DIGITS:
        tens = int(symbol)
        if not _ring_possible(state, range(tens * 10, tens * 10 + 10)):
            raise ValueError('no ring number available')
        return replace(state, control=PERCENT_DIGIT, ring_digit=tens)
    if c == PERCENT_DIGIT and symbol in DIGITS:
        return _ring(state, state.ring_digit * 10 + int(symbol), state.pending_bond)

    # branches and termination
    if c in (ATOM, BRANCHED):
        if symbol == '(':
            if state.current.remaining < 1:
                raise ValueError('valence exceeded')
            return replace(state, control=BRANCH, stack=state.stack + (Frame('(', state.current),),
                           current=None)
        if symbol == ')':
            if not state.stack or state.stack[-1].symbol != '(':
                raise ValueError('no open branch')
            return replace(state, control=BRANCHED, current=state.stack[-1].atom,
                           stack=state.stack[:-1])
        if symbol == EOS:
            if state.stack or state.open_ring_count:
                raise ValueError('open structure')
            return replace(state, control=DONE)

    # bracket interior
    draft = state.draft
    if c in (BR_OPEN, BR_ISO1, BR_ISO2) and symbol in DIGITS:
        return replace(state, control=ISO_NEXT[c])
    if c in (BR_OPEN, BR_ISO1, BR_ISO2, BR_ISO3) and _bracket_symbol_ok(symbol):
        aromatic = symbol[0].islower()
        element = symbol.capitalize() if aromatic else symbol
        budget = molgraph.valence_bound(Atom(element, aromatic=aromatic))
        if budget is not None and draft.incoming > budget:
            raise ValueError('atom valence exceeded')
        return replace(state, control=BR_SYMBOL,
                       draft=replace(draft, symbol=element, aromatic=aromatic, budget=budget))
    if c == BR_SYMBOL and symbol in CHIRAL_TOKENS:
        return replace(state, control=BR_CHIRAL)
    if c in (BR_SYMBOL, BR_CHIRAL) and symbol == 'H':
        return _hydrogens(state, 1, BR_H)
    if c == BR_H and symbol in DIGITS:
        return _hydrogens(state, int(symbol), BR_HCOUNT)
    if c in CHARGE_FROM and symbol in ('+', '-'):
        return replace(state, control=BR_SIGN)
    if c == BR_SIGN and symbol in DIGITS:
        return replace(state, control=BR_CHARGE)
    if c in CLASS_FROM and symbol == ':':
        return replace(state, control=BR_CLASS0)
    if c in CLASS_NEXT and symbol in DIGITS:
        return replace(state, control=CLASS_NEXT[c])
    if c in AFTER_SYMBOL and symbol == ']':
        neighbors = frozenset({draft.anchor}) if draft.anchor is not None else frozenset()
        record = AtomRecord(draft.id, draft.symbol, draft.aromatic, draft.used, draft.budget, neighbors)
        return replace(state, control=ATOM, current=record, draft=None, stack=state.stack[:-1])

    raise ValueError('not allowed here')


def _hydrogens(state: PdaState, count: int, control: str) -> PdaState:
    draft = replace(state.draft, hcount=count)
    if draft.budget is not None and draft.used > draft.budget:
        raise ValueError('valence exceeded')
    return replace(state, control=control, draft=draft)


def advance(state: PdaState, token) -> PdaState:
    """Apply one vocabulary symbol (or a smiles Token's single piece)"""
    symbol = token if isinstance(token, str) else _token_symbol(token)
    try:
        return _step(state, symbol)
    except ValueError:
        raise IllegalToken(state.summary(), symbol) from None


def _token_symbol(token) -> str:
    if len(token.pieces) != 1:
        raise IllegalToken('-', token.text)
    return token.pieces[0]


def try_advance(state: PdaState, symbol: str) -> Optional[PdaState]:
    try:
        return _step(state, symbol)
    except ValueError:
        return None


# Masks

def _candidates(control: str) -> Sequence[str]:
    return _CANDIDATES[control]


def _build_candidates() -> dict:
    atoms = list(ORGANIC_ATOMS) + list(AROMATIC_ATOMS) + ['[']
    digits = list(DIGITS)
    bonds = list(BOND_SYMBOLS)
    symbols = [s for s in molgraph.element_symbols()] + list(BRACKET_AROMATIC)
    charge = ['+', '-']
    return {
        START: atoms,
        BRANCH: bonds + atoms,
        BOND_ATOM: atoms,
        RING_BOND: digits + ['%'] + atoms,
        ATOM: digits + ['%'] + bonds + atoms + ['(', ')', EOS],
        BRANCHED: bonds + atoms + ['(', ')', EOS],
        PERCENT: digits,
        PERCENT_DIGIT: digits,
        DONE: [],
        BR_OPEN: digits + symbols,
        BR_ISO1: digits + symbols,
        BR_ISO2: digits + symbols,
        BR_ISO3: symbols,
        BR_SYMBOL: list(CHIRAL_TOKENS) + ['H'] + charge + [':', ']'],
        BR_CHIRAL: ['H'] + charge + [':', ']'],
        BR_H: digits + charge + [':', ']'],
        BR_HCOUNT: charge + [':', ']'],
        BR_SIGN: digits + [':', ']'],
        BR_CHARGE: [':', ']'],
        BR_CLASS0: digits + [']'],
        BR_CLASS1: digits + [']'],
        BR_CLASS2: digits + [']'],
        BR_CLASS3: [']'],
    }


_CANDIDATES = _build_candidates()


def legal_symbols(state: PdaState) -> List[str]:
    return [s for s in _candidates(state.control) if try_advance(state, s) is not None]


def valid_next_tokens(state: PdaState, vocab: Optional[Vocabulary] = None) -> np.ndarray:
    """Boolean mask over the vocabulary: True exactly where advance succeeds"""
    vocab = vocab or Vocabulary.default()
    mask = np.zeros(len(vocab), dtype=bool)
    for symbol in legal_symbols(state):
        if symbol in vocab:
            mask[vocab.index[symbol]] = True
    return mask


def run(symbols: Iterable[str], state: Optional[PdaState] = None) -> PdaState:
    state = state or initial_state()
    for symbol in symbols:
        state = advance(state, symbol)
    return state


def accepts(symbols: Sequence[str]) -> bool:
    """Whole-sequence acceptance (eos appended when missing)"""
    symbols = list(symbols)
    if not symbols or symbols[-1] != EOS:
        symbols.append(EOS)
    state = initial_state()
    for symbol in symbols:
        state = try_advance(state, symbol)
        if state is None:
            return False
    return state.control == DONE


def accepts_text(s: str) -> bool:
    try:
        stream = tokenize(s)
    except Exception:
        return False
    return accepts(stream.symbols)


# Forced closure

def _first_legal(state: PdaState, options: Iterable[str]) -> Optional[str]:
    for symbol in options:
        if try_advance(state, symbol) is not None:
            return symbol
    return None


def _ring_symbol(number: int) -> str:
    return str(number) if number < 10 else '%'


def closing_token(state: PdaState, vocab: Optional[Vocabulary] = None) -> str:
    """Next symbol of a deterministic completion that closes every open structure

    With a vocabulary, only its symbols are used.
    """
    c = state.control
    open_rings = [n for n, slot in enumerate(state.rings) if slot is not None]
    heavy = bool(open_rings) and all(state.rings[n].pending >= 4 for n in open_rings)
    chain_atoms = ['S', 'C', '['] if heavy else ['C', 'S', '[']
    if vocab is not None:
        chain_atoms = [s for s in chain_atoms if s in vocab]
    choice: Optional[str] = None

    if c in (BR_OPEN, BR_ISO1, BR_ISO2, BR_ISO3):
        choice = _first_legal(state, ['C', 'S', 'Fe'])
    elif c in AFTER_SYMBOL:
        choice = _first_legal(state, [']'] + list(DIGITS))
    elif c == PERCENT:
        for n in open_rings:
            if n >= 10 and _ring_possible(state, [n]):
                choice = str(n // 10)
                break
    elif c == PERCENT_DIGIT:
        for n in open_rings:
            if n // 10 == state.ring_digit and try_advance(state, str(n % 10)) is not None:
                choice = str(n % 10)
                break
    elif c == RING_BOND:
        for n in open_rings:
            if state.rings[n].label == state.pending_bond:
                symbol = _ring_symbol(n)
                if (n < 10 and try_advance(state, symbol) is not None) or (
                        n >= 10 and _ring_possible(state, [n])):
                    choice = symbol
                    break
        if choice is None:
            choice = _first_legal(state, chain_atoms)
    elif c in (START, BRANCH, BOND_ATOM):
        choice = _first_legal(state, chain_atoms)
    elif c == ATOM and open_rings:
        for n in open_rings:
            label = state.rings[n].label
            bonded = state if not label else try_advance(state, label)
            if bonded is None:
                continue
            if _ring_possible(replace(bonded, pending_bond=label), [n]):
                choice = label or _ring_symbol(n)
                break
        if choice is None:
            choice = _first_legal(state, chain_atoms + [')'])
    elif c in (ATOM, BRANCHED):
        if open_rings:
            choice = _first_legal(state, chain_atoms + [')'])
        else:
            choice = ')' if state.stack else EOS

    if choice is not None and vocab is not None and choice not in vocab:
        choice = None
    if choice is None:
        options = _candidates(c)
        if vocab is not None:
            options = [s for s in options if s in vocab]
        choice = _first_legal(state, options)
    if choice is None:
        raise IllegalToken(state.summary(), '<closing>')
    return choice


def closing_symbols(state: PdaState, limit: int = 10_000,
                    vocab: Optional[Vocabulary] = None) -> List[str]:
    out: List[str] = []
    while state.control != DONE and len(out) < limit:
        symbol = closing_token(state, vocab)
        out.append(symbol)
        state = _step(state, symbol)
    return out


def closure_debt(state: PdaState, vocab: Optional[Vocabulary] = None) -> int:
    """Symbols (eos excluded) the deterministic completion still needs"""
    return sum(1 for s in closing_symbols(state, vocab=vocab) if s != EOS)


# Sampling

# Length slack above the current debt within which no single symbol can overrun
_DEBT_MARGIN = 16


def _debt_bound(state: PdaState) -> int:
    """Cheap upper bound on closure_debt"""
    return 8 * state.open_ring_count + 3 * len(state.stack) + 10


def sample_valid(rng_seed: int, max_len: int,
                 temperature_weights: Optional[Sequence[float]] = None,
                 vocab: Optional[Vocabulary] = None) -> str:
    """Random string accepted by the automaton, closed off before max_len symbols"""
    if max_len < 1:
        raise ValueError('max_len must be at least 1')
    vocab = vocab or Vocabulary.default()
    weights = None if temperature_weights is None else np.asarray(temperature_weights, dtype=float)
    rng = generator(rng_seed)
    state = initial_state()
    out: List[str] = []

    while state.control != DONE:
        remaining = max_len - state.length
        if remaining <= 0:
            symbol = closing_token(state)
        else:
            options = legal_symbols(state)
            tight = (remaining <= _debt_bound(state) + _DEBT_MARGIN
                     and remaining <= closure_debt(state) + _DEBT_MARGIN)
            symbol = None
            while options:
                symbol = _draw(options, weights, vocab, rng)
                if not tight or symbol == EOS:
                    break
                after = _step(state, symbol)
                if 1 + closure_debt(after) <= remaining:
                    break
                options.remove(symbol)
                symbol = None
            if symbol is None:
                symbol = closing_token(state)
        state = _step(state, symbol)
        if symbol != EOS:
            out.append(symbol)
    return ''.join(out)


def _draw(options: List[str], weights: Optional[np.ndarray], vocab: Vocabulary,
          rng: np.random.Generator) -> str:
    if weights is None:
        return options[int(rng.integers(len(options)))]
    w = np.array([weights[vocab.index[s]] for s in options], dtype=float)
    if w.sum() <= 0:
        return options[int(rng.integers(len(options)))]
    return options[int(rng.choice(len(options), p=w / w.sum()))]


class GrammarMask:
    """Vocabulary-id view of the automaton for decoders, with per-state caches"""

    def __init__(self, vocab: Optional[Vocabulary] = None, cache_size: int = 50_000,
                 completion_limit: int = 512):
        self.vocab = vocab or Vocabulary.default()
        self.cache_size = cache_size
        self.completion_limit = completion_limit
        self._cache: dict = {}
        self._lengths: dict = {}

    def initial(self) -> PdaState:
        return initial_state()

    def allowed(self, state: PdaState) -> np.ndarray:
        mask = self._cache.get(state)
        if mask is None:
            mask = valid_next_tokens(state, self.vocab)
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._cache[state] = mask
        return mask

    def completion_length(self, state: PdaState) -> float:
        """Non-eos symbols the in-vocabulary closing completion needs (inf if it has none)"""
        length = self._lengths.get(state)
        if length is None:
            try:
                symbols = closing_symbols(state, self.completion_limit, self.vocab)
            except (IllegalToken, ValueError):
                symbols = None
            if not symbols or symbols[-1] != EOS:
                length = INF
            else:
                length = sum(1 for s in symbols if s != EOS)
            if len(self._lengths) >= self.cache_size:
                self._lengths.clear()
            self._lengths[state] = length
        return length

    def within(self, state: PdaState, budget: int) -> np.ndarray:
        """Allowed ids after which the string can still close in `budget` more symbols

        `budget` counts every symbol still to come after this one, eos included.
        Eos stays allowed whenever the automaton accepts it. Starting from a state
        whose completion fits, the closing symbol always survives, so the mask is
        never empty.
        """
        mask = self.allowed(state).copy()
        for token in np.flatnonzero(mask):
            if token == self.vocab.eos_id:
                continue
            after = self.advance(state, token)
            if self.completion_length(after) + 1 > budget:
                mask[token] = False
        return mask

    def advance(self, state: PdaState, token_id: int) -> PdaState:
        return advance(state, self.vocab.symbols[int(token_id)])
