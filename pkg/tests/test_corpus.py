import pytest

from allsmiles import corpus, molgraph, smiles
from allsmiles.errors import CorpusEmpty, UnclosedRing


def test_scan_reports_bad_lines(write_lines) -> None:
    path = write_lines(['# header', 'CCO', 'C1CC', '', 'c1ccccc1\t78.11\t1\t1'])
    molecules, errors = corpus.scan_corpus(path)
    assert [m.smiles for m in molecules] == ['CCO', 'c1ccccc1']
    assert [m.line for m in molecules] == [2, 5]
    assert len(errors) == 1
    assert errors[0].line == 3
    assert isinstance(errors[0].error, UnclosedRing)
    assert molecules[1].labels == {'mw': 78.11, 'rings': 1.0, 'aromatic': 1.0}


def test_read_corpus_fills_missing_labels(write_lines) -> None:
    path = write_lines(['CCO\t\t0', 'c1ccccc1'])
    molecules = corpus.read_corpus(path, label_missing=True)
    assert molecules[0].labels['rings'] == 0.0
    assert molecules[0].labels['mw'] == pytest.approx(molgraph.molecular_weight(molecules[0].graph))
    assert molecules[1].labels['aromatic'] == 1.0


def test_read_corpus_empty(write_lines) -> None:
    with pytest.raises(CorpusEmpty):
        corpus.read_corpus(write_lines(['# nothing here', 'C1CC']))


def test_bundled_corpus_parses(corpus_smiles) -> None:
    assert len(corpus_smiles) >= 40
    for s in corpus_smiles:
        smiles.parse(s)


def test_generated_corpus(tmp_path) -> None:
    frame = corpus.generate_corpus(6, max_len=30, seed=4)
    again = corpus.generate_corpus(6, max_len=30, seed=4)
    assert frame.equals(again)
    assert list(frame.columns) == ['smiles', *corpus.LABEL_COLUMNS]
    canonical = [smiles.canonical_smiles(s) for s in frame['smiles']]
    assert len(set(canonical)) == len(canonical)
    for row in frame.itertuples():
        g = smiles.parse(row.smiles).graph
        assert row.mw == pytest.approx(molgraph.molecular_weight(g))
        assert row.rings == molgraph.ring_count(g)

    path = tmp_path / 'gen.smi'
    corpus.write_corpus(frame, path)
    loaded = corpus.read_corpus(path)
    assert [m.smiles for m in loaded] == list(frame['smiles'])
    assert loaded[0].labels['mw'] == pytest.approx(frame['mw'][0], abs=1e-4)


def test_diameter_stats(write_lines) -> None:
    stats = corpus.diameter_stats(corpus.read_corpus(write_lines(['C', 'CCO', 'CCCC'])))
    assert stats == {'count': 3, 'mean': pytest.approx(5 / 3), 'max': 3}
    with pytest.raises(CorpusEmpty):
        corpus.diameter_stats([])


def test_split_holdout(corpus_smiles, write_lines) -> None:
    molecules = corpus.read_corpus(write_lines(corpus_smiles))
    train, held = corpus.split_holdout(molecules, 10, seed=1)
    assert len(held) == 10 and len(train) == len(molecules) - 10
    assert not {m.line for m in train} & {m.line for m in held}
    again, _ = corpus.split_holdout(molecules, 10, seed=1)
    assert [m.line for m in again] == [m.line for m in train]
