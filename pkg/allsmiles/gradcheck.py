#!/usr/bin/env python3
"""
Gradient check suite
Finite-difference checks for the tensor ops, every parametric block, and the
loss of a micro model end to end. All checks run in double precision against
a fixed random weighting of the outputs, so no gradient is trivially zero.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from allsmiles import nn, smiles, vae
from allsmiles import tensor as T
from allsmiles.corpus import PROPERTY_ORACLES
from allsmiles.log import get_logger
from allsmiles.seeding import generator
from allsmiles.tensor import GradCheckReport, Tensor

logger = get_logger(__name__)

OP_TOLERANCE = 1e-6
BLOCK_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
OP_SEEDS = 10
BLOCK_SEEDS = 5

MICRO_SYMBOLS = [smiles.PAD, smiles.EOS, 'C', 'N', 'O', 'c', 'n', '(', ')', '=', '1', '2']
MICRO_MOLECULES = ['CC(=O)N', 'c1ccncc1', 'OCC1CC1']

# f builds a scalar from the inputs; kinks per input (or None)
Case = Tuple[Callable[[], Tensor], List[Tensor], list]


@dataclass
class SuiteResult:
    reports: List[GradCheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> List[GradCheckReport]:
        return [r for r in self.reports if not r.passed]


def _leaf(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return T.parameter(rng.uniform(low, high, size=shape))


# Op cases

def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Case]]:
    rows, cols = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    a, b = _leaf(rng, (rows, cols)), _leaf(rng, (rows, cols))
    m = _leaf(rng, (cols, 3))
    pos = _leaf(rng, (rows, cols), 0.5, 2.0)
    weights = {}

    def case(fn: Callable[..., Tensor], *inputs: Tensor, kinks=None) -> Case:
        def f():
            out = fn(*inputs)
            if out.shape not in weights:
                weights[out.shape] = rng.standard_normal(out.shape)
            return (out * weights[out.shape]).sum()
        return f, list(inputs), kinks

    return [
        ('add', case(T.add, a, b)),
        ('sub', case(T.sub, a, b)),
        ('mul', case(T.mul, a, b)),
        ('div', case(T.div, a, pos)),
        ('matmul', case(T.matmul, a, m)),
        ('power', case(lambda x: T.power(x, 3.0), a)),
        ('sqrt', case(T.sqrt, pos)),
        ('exp', case(T.exp, a)),
        ('log', case(T.log, pos)),
        ('sigmoid', case(T.sigmoid, a)),
        ('tanh', case(T.tanh, a)),
        ('relu', case(T.relu, a, kinks=[[0.0]])),
        ('sin', case(T.sin, a)),
        ('cos', case(T.cos, a)),
        ('hard_tanh', case(lambda x: T.hard_tanh(x, -0.5, 0.5), a, kinks=[[-0.5, 0.5]])),
        ('softmax', case(lambda x: T.softmax(x, axis=-1), a)),
        ('log_softmax', case(lambda x: T.log_softmax(x, axis=-1), a)),
        ('sum', case(lambda x: x.sum(axis=0), a)),
        ('mean', case(lambda x: x.mean(axis=-1), a)),
        ('max', case(lambda x: x.max(axis=-1), a)),
        ('concat', case(lambda x, y: T.concat([x, y], axis=-1), a, b)),
        ('stack', case(lambda x, y: T.stack([x, y], axis=0), a, b)),
        ('slice', case(lambda x: x[..., 1:], a)),
        ('take', case(lambda x: T.take(x, np.array([0, rows - 1, 0])), a)),
        ('transpose', case(lambda x: x.T, a)),
    ]


def check_ops(seeds: int = OP_SEEDS, tolerance: float = OP_TOLERANCE) -> List[GradCheckReport]:
    reports = []
    with T.precision(np.float64):
        for seed in range(seeds):
            for name, (f, inputs, kinks) in _op_cases(generator(seed, 8)):
                reports.append(T.grad_check(f, inputs, tolerance, kinks=kinks,
                                            name=f'op.{name}[{seed}]', atol=1e-9))
    return reports


# Block cases

def _gru_case(rng: np.random.Generator) -> Case:
    p = nn.GruParams.create(3, 4, rng)
    x, h = _leaf(rng, (2, 3)), _leaf(rng, (2, 4))
    weights = rng.standard_normal((2, 4))
    return (lambda: (nn.gru_step(p, x, h) * weights).sum()), [x, h] + p.parameters(), None


def _lstm_case(rng: np.random.Generator) -> Case:
    p = nn.LstmParams.create(3, 4, rng)
    x, h, c = _leaf(rng, (2, 3)), _leaf(rng, (2, 4)), _leaf(rng, (2, 4))
    wh, wc = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def f():
        h_t, c_t = nn.lstm_step(p, x, h, c)
        return (h_t * wh).sum() + (c_t * wc).sum()
    return f, [x, h, c] + p.parameters(), None


def _bigru_case(rng: np.random.Generator) -> Case:
    fwd, bwd = nn.GruParams.create(3, 2, rng), nn.GruParams.create(3, 2, rng)
    seq = _leaf(rng, (4, 2, 3))
    mask = np.ones((4, 2))
    mask[3, 1] = 0.0
    weights = rng.standard_normal((4, 2, 4))

    def f():
        out, (last_f, last_b) = nn.bigru_encode(fwd, bwd, seq, mask)
        return (out * weights).sum() + last_f.sum() - last_b.sum()
    return f, [seq] + fwd.parameters() + bwd.parameters(), None


def _attention_case(rng: np.random.Generator) -> Case:
    p = nn.AttentionParams.create(3, 4, 5, rng)
    q, keys = _leaf(rng, (2, 3)), _leaf(rng, (2, 3, 4))
    key_mask = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    weights = rng.standard_normal((2, 4))
    return (lambda: (nn.attention(p, q, keys, key_mask) * weights).sum()), [q, keys] + p.parameters(), None


def _pool_case(rng: np.random.Generator) -> Case:
    p = nn.PoolGateParams.create(4, rng)
    reps = _leaf(rng, (3, 2, 4))
    weights = rng.standard_normal((2, 4))
    return (lambda: (nn.gated_pool(p, reps) * weights).sum()), [reps] + p.parameters(), None


def _layer_norm_case(rng: np.random.Generator) -> Case:
    p = nn.LayerNormParams.create(5)
    p.gain.data = rng.uniform(0.5, 1.5, size=5)
    x = _leaf(rng, (3, 5))
    weights = rng.standard_normal((3, 5))
    return (lambda: (p(x) * weights).sum()), [x] + p.parameters(), None


def _renorm_case(rng: np.random.Generator) -> Case:
    state = nn.BatchRenorm.create(4)
    x = _leaf(rng, (5, 4))
    weights = rng.standard_normal((5, 4))
    return (lambda: (nn.batch_renorm(state, x, training=True, update=False) * weights).sum()), \
        [x] + state.parameters(), None


BLOCKS = {
    'gru_step': _gru_case,
    'lstm_step': _lstm_case,
    'bigru_encode': _bigru_case,
    'attention': _attention_case,
    'gated_pool': _pool_case,
    'layer_norm': _layer_norm_case,
    'batch_renorm': _renorm_case,
}


def check_blocks(seeds: int = BLOCK_SEEDS, tolerance: float = BLOCK_TOLERANCE) -> List[GradCheckReport]:
    reports = []
    with T.precision(np.float64):
        for name, build in BLOCKS.items():
            for seed in range(seeds):
                f, inputs, kinks = build(generator(seed, 9))
                reports.append(T.grad_check(f, inputs, tolerance, kinks=kinks,
                                            name=f'block.{name}[{seed}]', atol=1e-9))
    return reports


# End-to-end

def micro_config(**overrides) -> vae.ModelConfig:
    values = dict(embed_width=4, encoder_depth=1, gru_hidden=8, hierarchy_layers=2, latent_width=4,
                  query_hidden=4, decoder_hidden=8, smiles_per_side=2, beam_width=2, max_decode_len=40)
    values.update(overrides)
    return vae.ModelConfig(**values)


def micro_vocabulary() -> smiles.Vocabulary:
    return smiles.Vocabulary(MICRO_SYMBOLS)


def micro_views(config: vae.ModelConfig, vocab: smiles.Vocabulary,
                molecules: Sequence[str] = MICRO_MOLECULES, seed: int = 0) -> List[vae.MoleculeView]:
    views = []
    for i, text in enumerate(molecules):
        g = smiles.parse(text).graph
        labels = {name: oracle(g) for name, oracle in PROPERTY_ORACLES.items()}
        views.append(vae.views_from_enumeration(g, config, seed + i, labels, vocab, text))
    return views


def check_model(seed: int = 0, tolerance: float = MODEL_TOLERANCE, probes: int = 100) -> GradCheckReport:
    """The training loss of a micro model against every parameter (probed)"""
    with T.precision(np.float64):
        config = micro_config()
        model = vae.AllSmilesVae(config, micro_vocabulary(), seed)
        views = micro_views(config, model.vocab, seed=seed)
        params = model.parameters()

        def f():
            return vae.elbo(model, views, generator(seed, 4), 1.0, training=True)[0]

        return T.grad_check(f, params, tolerance, max_probes=max(1, probes // len(params)),
                            rng=generator(seed, 10), name='model.elbo', atol=1e-7)


def run_suite(ops: bool = True, blocks: bool = True, model: bool = True) -> SuiteResult:
    result = SuiteResult()
    if ops:
        result.reports += check_ops()
    if blocks:
        result.reports += check_blocks()
    if model:
        result.reports.append(check_model())
    for report in result.reports:
        if report.passed:
            logger.debug(report.summary())
        else:
            logger.error(f"❌ {report.summary()}")
    logger.info(f"{'✅' if result.passed else '❌'} Gradient suite: "
                f"{len(result.reports) - len(result.failures)}/{len(result.reports)} checks passed")
    return result
