import numpy as np
import pytest

from allsmiles import grammar
from allsmiles.errors import AllSmilesError, IllegalToken
from allsmiles.grammar import GrammarMask, advance, initial_state, run, valid_next_tokens
from allsmiles.seeding import generator
from allsmiles.smiles import EOS, PAD, Vocabulary, parse, tokenize

VOCAB = Vocabulary.default()


def allowed(state, symbol):
    return bool(valid_next_tokens(state)[VOCAB.index[symbol]])


def prefix(s):
    return run(tokenize(s).symbols[:-1])


def parses(s):
    try:
        parse(s)
    except AllSmilesError:
        return False
    return True


def test_initial_state_mask() -> None:
    state = initial_state()
    assert allowed(state, 'C')
    assert allowed(state, '[')
    assert not allowed(state, ')')
    assert not allowed(state, EOS)


def test_first_atom_budget() -> None:
    state = advance(initial_state(), 'C')
    assert state.current.element == 'C'
    assert (state.current.used, state.current.budget) == (0, 4)


def test_ring_closes_and_eos_follows() -> None:
    state = prefix('C1CC')
    assert state.open_ring_count == 1
    assert not allowed(state, EOS)
    state = advance(state, '1')
    assert state.open_ring_count == 0
    assert not any(state.ring_bits)
    assert allowed(state, EOS)


def test_empty_branch_is_illegal() -> None:
    with pytest.raises(IllegalToken):
        advance(prefix('C('), ')')


def test_oxygen_double_bond_budget() -> None:
    assert allowed(prefix('O='), 'O')
    assert not allowed(prefix('O=O'), '=')
    assert not allowed(prefix('O=O'), '(')


def test_saturated_root_allows_only_eos() -> None:
    state = prefix('C(C)(C)(C)(C)')
    mask = valid_next_tokens(state)
    assert [VOCAB.symbols[i] for i in np.flatnonzero(mask)] == [EOS]


def test_ring_label_must_match() -> None:
    state = prefix('C=1CCC')
    assert not allowed(state, '1')
    assert allowed(state, '=')
    assert allowed(advance(state, '='), '1')


def test_duplicate_ring_closure_is_illegal() -> None:
    assert not allowed(prefix('C1'), '1')
    assert not allowed(prefix('C1C'), '1')
    assert not allowed(prefix('C12CCC1'), '2')


def test_dead_end_is_masked() -> None:
    # closing ring 1 at the hydroxyl oxygen would leave ring 2 unclosable
    state = prefix('C12CCO')
    assert not allowed(state, '1')
    assert allowed(prefix('C12CCC'), '1')


def test_bracket_interior_order() -> None:
    state = run(['[', '1', '3', 'C'])
    assert allowed(state, '@@')
    assert allowed(state, 'H')
    assert not allowed(state, '1')
    state = run(['[', 'C', 'H', '4'])
    assert not allowed(state, 'H')
    assert allowed(state, ']')
    assert not allowed(run(['[', 'C', 'H']), '5')


def test_percent_ring_numbers() -> None:
    state = prefix('C%12CC')
    assert allowed(state, '%')
    state = run(['%', '1', '2'], state)
    assert state.open_ring_count == 0
    assert allowed(state, EOS)


def test_unbounded_element_keeps_bonding() -> None:
    state = prefix('[Fe](C)(C)(C)(C)(C)(C)')
    assert allowed(state, '(')
    assert allowed(state, '$')


def test_bundled_corpus_accepted(corpus_smiles) -> None:
    for s in corpus_smiles:
        assert grammar.accepts_text(s), s


def test_branch_after_double_bond_branch() -> None:
    assert grammar.accepts_text('C1CC(=C)(C1)')
    assert parses('C1CC(=C)(C1)')


def check_mask_along_trajectories(count: int, seed: int = 5) -> None:
    rng = generator(seed)
    for _ in range(count):
        state = initial_state()
        while state.control != grammar.DONE:
            mask = valid_next_tokens(state)
            assert mask.any()
            for i, symbol in enumerate(VOCAB.symbols):
                ok = grammar.try_advance(state, symbol) is not None
                assert ok == bool(mask[i])
            choices = np.flatnonzero(mask)
            symbol = VOCAB.symbols[int(rng.choice(choices))]
            if state.length > 30:
                symbol = grammar.closing_token(state)
            state = advance(state, symbol)


def _mutate(symbols, rng):
    out = list(symbols)
    op = int(rng.integers(3))
    position = int(rng.integers(len(out) + 1))
    pool = ['C', 'c', 'O', 'N', '1', '2', '(', ')', '=', '#', '[', ']', 'H', '%', 'Cl']
    if op == 0 and out:
        del out[min(position, len(out) - 1)]
    elif op == 1 and out:
        out[min(position, len(out) - 1)] = pool[int(rng.integers(len(pool)))]
    else:
        out.insert(position, pool[int(rng.integers(len(pool)))])
    return ''.join(out)


def check_fuzz_agreement(corpus_smiles, count: int, seed: int = 9) -> None:
    rng = generator(seed)
    for trial in range(count):
        source = corpus_smiles[trial % len(corpus_smiles)]
        s = _mutate(tokenize(source).symbols[:-1], rng)
        assert grammar.accepts_text(s) == parses(s), s


def check_samples_parse(count: int) -> None:
    for seed in range(count):
        s = grammar.sample_valid(seed, max_len=60)
        assert parses(s), s
        assert len(tokenize(s).symbols) - 1 <= 60


def test_sample_valid_max_len_one() -> None:
    for seed in range(20):
        s = grammar.sample_valid(seed, max_len=1)
        assert len(parse(s).graph) == 1


def test_sample_valid_deterministic() -> None:
    assert grammar.sample_valid(3, 40) == grammar.sample_valid(3, 40)


def test_sample_valid_weighted() -> None:
    weights = np.zeros(len(VOCAB))
    for symbol in ('C', 'O', EOS):
        weights[VOCAB.index[symbol]] = 1.0
    for seed in range(20):
        s = grammar.sample_valid(seed, 30, temperature_weights=weights)
        assert set(s) <= {'C', 'O'}
        assert parses(s)


def test_closure_debt() -> None:
    assert grammar.closure_debt(initial_state()) == 1
    assert grammar.closure_debt(prefix('CC')) == 0
    assert grammar.closure_debt(prefix('C(C')) == 1
    assert grammar.closure_debt(prefix('C1C')) > 0
    symbols = grammar.closing_symbols(prefix('C1CC(C2CC'))
    assert parses('C1CC(C2CC' + ''.join(s for s in symbols if s != EOS))


def test_mask_sound_along_random_trajectories() -> None:
    check_mask_along_trajectories(40)


def test_agrees_with_parser_on_fuzz(corpus_smiles) -> None:
    check_fuzz_agreement(corpus_smiles, 2000)


def test_sample_valid_always_parses() -> None:
    check_samples_parse(100)


@pytest.mark.slow
def test_mask_sound_full_size() -> None:
    check_mask_along_trajectories(10_000, seed=15)


@pytest.mark.slow
def test_agrees_with_parser_full_size(corpus_smiles) -> None:
    check_fuzz_agreement(corpus_smiles, 10_000, seed=19)


@pytest.mark.slow
def test_sample_valid_full_size() -> None:
    check_samples_parse(10_000)


def test_bracket_aromatic_boron() -> None:
    for s in ('c1cc[bH]c1', 'c1cc[b-]c1', 'c1cc[11bH]c1'):
        assert grammar.accepts_text(s), s
        assert parses(s), s
    assert allowed(run(['[']), 'b')


def test_closing_stays_inside_a_small_vocabulary() -> None:
    vocab = Vocabulary([PAD, EOS, 'C', 'O', '(', ')', '=', '1'])
    state = prefix('C1CC(C(=O')
    symbols = grammar.closing_symbols(state, vocab=vocab)
    assert symbols[-1] == EOS
    assert all(s in vocab for s in symbols)
    assert parses('C1CC(C(=O' + ''.join(symbols[:-1]))
    mask = valid_next_tokens(state, vocab)
    assert len(mask) == len(vocab)
    assert mask[vocab.index[")"]] and not mask[vocab.index[PAD]]


def test_length_aware_mask() -> None:
    mask = GrammarMask()
    state = prefix('C1CC')
    assert mask.completion_length(state) == 1
    tight = [VOCAB.symbols[i] for i in np.flatnonzero(mask.within(state, 1))]
    assert tight == ['1']
    assert mask.within(state, 0).sum() == 0
    assert mask.within(state, 2)[VOCAB.index['C']]
    roomy = mask.within(state, 20)
    assert roomy[VOCAB.index['C']] and roomy[VOCAB.index['1']]
    done = prefix('CC')
    assert [VOCAB.symbols[i] for i in np.flatnonzero(mask.within(done, 0))] == [EOS]
