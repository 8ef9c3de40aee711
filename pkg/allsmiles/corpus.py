#!/usr/bin/env python3
"""
Corpus files
One SMILES per line, optional tab-separated labels, `#` comments. Line
numbers are kept so bad lines can be reported individually.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from allsmiles import grammar, molgraph, smiles
from allsmiles.errors import AllSmilesError, CorpusEmpty
from allsmiles.log import get_logger
from allsmiles.molgraph import MolecularGraph
from allsmiles.seeding import child_seeds, generator

logger = get_logger(__name__)

LABEL_COLUMNS = ('mw', 'rings', 'aromatic')

PROPERTY_ORACLES: Dict[str, Callable[[MolecularGraph], float]] = {
    'mw': molgraph.molecular_weight,
    'rings': lambda g: float(molgraph.ring_count(g)),
    'aromatic': lambda g: float(molgraph.has_aromatic_ring(g)),
}

# Sampling weights that keep generated molecules organic-looking
DESK_WEIGHTS = {
    'C': 10.0, 'N': 2.0, 'O': 2.0, 'S': 0.4, 'F': 0.4, 'Cl': 0.4, 'c': 1.5, 'n': 0.3,
    '(': 2.0, ')': 2.5, '=': 0.8, '#': 0.2, '1': 0.8, '2': 0.4, '<eos>': 0.5,
}


@dataclass
class Molecule:
    smiles: str
    graph: MolecularGraph
    labels: Dict[str, float] = field(default_factory=dict)
    line: int = 0


@dataclass
class LineError:
    line: int
    text: str
    error: AllSmilesError


def _lines(source: Union[str, Path]) -> Iterator[Tuple[int, str]]:
    if str(source) == '-':
        text = sys.stdin.read()
    else:
        text = Path(source).read_text(encoding='utf-8')
    for number, line in enumerate(text.splitlines(), 1):
        line = line.rstrip('\r')
        if line.strip() and not line.lstrip().startswith('#'):
            yield number, line


def _labels(fields: Sequence[str]) -> Dict[str, float]:
    labels = {}
    for name, value in zip(LABEL_COLUMNS, fields):
        value = value.strip()
        if value:
            labels[name] = float(value)
    return labels


def scan_corpus(source: Union[str, Path]) -> Tuple[List[Molecule], List[LineError]]:
    """Parse every line, collecting failures instead of stopping at the first"""
    molecules, errors = [], []
    for number, line in _lines(source):
        text, *rest = line.split('\t')
        text = text.strip()
        try:
            g = smiles.parse(text).graph
        except AllSmilesError as exc:
            errors.append(LineError(number, text, exc))
            continue
        molecules.append(Molecule(text, g, _labels(rest), number))
    return molecules, errors


def read_corpus(source: Union[str, Path], label_missing: bool = False) -> List[Molecule]:
    """Molecules of a corpus file ('-' reads stdin); bad lines are skipped with a warning

    With label_missing, absent desk-scale labels are computed from the graph.
    """
    molecules, errors = scan_corpus(source)
    for e in errors:
        logger.warning(f"⚠️ line {e.line}: {e.error.name}: {e.error}")
    if not molecules:
        raise CorpusEmpty(f'no parseable molecules in {source}')
    if label_missing:
        for m in molecules:
            for name, oracle in PROPERTY_ORACLES.items():
                m.labels.setdefault(name, oracle(m.graph))
    return molecules


def write_corpus(frame: pd.DataFrame, target) -> None:
    """Tab-separated with a commented header, so read_corpus can load it back"""
    handle = sys.stdout if str(target) == '-' else open(target, 'w', encoding='utf-8', newline='')
    try:
        handle.write('#' + '\t'.join(frame.columns) + '\n')
        frame.to_csv(handle, sep='\t', header=False, index=False, float_format='%.4f')
    finally:
        if handle is not sys.stdout:
            handle.close()


def generate_corpus(n: int, max_len: int, seed: int,
                    weights: Optional[Dict[str, float]] = None,
                    max_attempts: Optional[int] = None, progress: bool = False) -> pd.DataFrame:
    """Distinct automaton-sampled molecules labelled by the desk-scale oracles"""
    vocab = smiles.Vocabulary.default()
    vector = np.zeros(len(vocab))
    for symbol, weight in (DESK_WEIGHTS if weights is None else weights).items():
        vector[vocab.index[symbol]] = weight
    attempts = max_attempts or max(10 * n, 100)

    seen, rows = set(), []
    bar = tqdm(total=n, desc='gen-corpus', disable=not progress)
    for sample_seed in child_seeds(seed, attempts):
        if len(rows) >= n:
            break
        text = grammar.sample_valid(sample_seed, max_len, temperature_weights=vector, vocab=vocab)
        g = smiles.parse(text).graph
        key = smiles.write_canonical(g)
        if key in seen:
            continue
        seen.add(key)
        rows.append({'smiles': text, **{name: oracle(g) for name, oracle in PROPERTY_ORACLES.items()}})
        bar.update(1)
    bar.close()
    if len(rows) < n:
        logger.warning(f"⚠️ only {len(rows)} distinct molecules after {attempts} draws")
    return pd.DataFrame(rows, columns=['smiles', *LABEL_COLUMNS])


def diameter_stats(molecules: Sequence[Molecule]) -> Dict[str, float]:
    """Mean and max graph diameter (longest shortest path in bonds)"""
    if not molecules:
        raise CorpusEmpty('no molecules')
    diameters = pd.Series([molgraph.graph_diameter(m.graph) for m in molecules])
    return {'count': int(diameters.size), 'mean': float(diameters.mean()), 'max': int(diameters.max())}


def split_holdout(molecules: Sequence[Molecule], holdout: int, seed: int) -> Tuple[List[Molecule], List[Molecule]]:
    order = generator(seed, 5).permutation(len(molecules))
    held = set(order[:holdout].tolist())
    train = [m for i, m in enumerate(molecules) if i not in held]
    return train, [molecules[i] for i in sorted(held)]
