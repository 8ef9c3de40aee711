#!/usr/bin/env python3
"""
All SMILES VAE
Several SMILES strings of one molecule are encoded jointly, with the hidden
states of homologous atoms pooled across strings between layers. The latent
code is a hierarchy of conditional Gaussians; an LSTM decodes it into a
different set of strings of the same molecule, and regressors predict
molecular properties from it.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from allsmiles import molgraph, nn, smiles
from allsmiles import tensor as T
from allsmiles.errors import (AlignmentMissing, ConfigError, EmptyTargets, MaxLengthExceeded,
                              MoleculeMismatch, SmilesError, GraphError)
from allsmiles.grammar import GrammarMask, PdaState
from allsmiles.log import get_logger
from allsmiles.molgraph import MolecularGraph
from allsmiles.nn import (AttentionParams, BatchRenorm, Embedding, GruParams, LayerNormParams,
                          Linear, LstmParams, Module, PoolGateParams, ReluNet)
from allsmiles.seeding import generator
from allsmiles.settings import from_mapping
from allsmiles.smiles import ParseResult, Vocabulary
from allsmiles.tensor import Tensor

logger = get_logger(__name__)

LINEAR = 'linear'
LOGISTIC = 'logistic'
KL_MODES = ('unscaled', 'scaled_by_K')
ABLATIONS = ('no_atom_pooling', 'one_smiles_enc', 'one_smiles_encdec_distinct',
             'one_smiles_encdec_same', 'no_posterior_hierarchy')
DEFAULT_PROPERTIES = {'mw': LINEAR, 'rings': LINEAR, 'aromatic': LOGISTIC}
MAX_DECODE_LEN = 200


@dataclass
class ModelConfig:
    embed_width: int = 32
    encoder_depth: int = 3
    gru_hidden: int = 64
    hierarchy_layers: int = 4
    latent_width: int = 8
    query_hidden: int = 32
    decoder_hidden: int = 256
    smiles_per_side: int = 5
    kl_scale_mode: str = 'unscaled'
    kl_anneal_steps: int = 1000
    beam_width: int = 5
    max_decode_len: int = MAX_DECODE_LEN
    grammar_mask_decoding: bool = False
    clamp_safety: float = 10.0
    properties: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROPERTIES))
    no_atom_pooling: bool = False
    one_smiles_enc: bool = False
    one_smiles_encdec_distinct: bool = False
    one_smiles_encdec_same: bool = False
    no_posterior_hierarchy: bool = False

    @classmethod
    def from_dict(cls, data) -> 'ModelConfig':
        return from_mapping(cls, data)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def validate(self) -> None:
        sizes = ('embed_width', 'encoder_depth', 'gru_hidden', 'hierarchy_layers', 'latent_width',
                 'query_hidden', 'decoder_hidden', 'smiles_per_side', 'beam_width', 'max_decode_len')
        for name in sizes:
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be at least 1', key=name)
        if self.kl_scale_mode not in KL_MODES:
            raise ConfigError(f'kl_scale_mode must be one of {KL_MODES}', key='kl_scale_mode')
        single = [flag for flag in ABLATIONS if flag.startswith('one_smiles') and getattr(self, flag)]
        if len(single) > 1:
            raise ConfigError(f'at most one one_smiles_* flag may be set, got {single}', key='ablation')
        for name, kind in self.properties.items():
            if kind not in (LINEAR, LOGISTIC):
                raise ConfigError(f'property {name} has unknown head kind {kind!r}', key=name)

    @property
    def encoder_strings(self) -> int:
        if self.one_smiles_enc or self.one_smiles_encdec_distinct or self.one_smiles_encdec_same:
            return 1
        return self.smiles_per_side

    @property
    def decoder_strings(self) -> int:
        if self.one_smiles_encdec_distinct or self.one_smiles_encdec_same:
            return 1
        return self.smiles_per_side

    @property
    def latent_widths(self) -> List[int]:
        if self.no_posterior_hierarchy:
            return [self.hierarchy_layers * self.latent_width]
        return [self.latent_width] * self.hierarchy_layers

    @property
    def latent_size(self) -> int:
        return sum(self.latent_widths)

    @property
    def kl_scale(self) -> float:
        return float(self.smiles_per_side) if self.kl_scale_mode == 'scaled_by_K' else 1.0

    @property
    def ablations(self) -> List[str]:
        return [flag for flag in ABLATIONS if getattr(self, flag)]


# Encoder inputs

@dataclass(frozen=True)
class StringView:
    """One SMILES string as model input: vocabulary ids ending in eos, and the
    symbol position of every graph atom (indexed by atom)"""
    text: str
    ids: Tuple[int, ...]
    atom_positions: Tuple[int, ...]


@dataclass
class MoleculeView:
    encoder: List[StringView]
    decoder: List[StringView]
    n_atoms: int
    labels: Dict[str, float] = field(default_factory=dict)
    source: str = ''


def string_view(stream: smiles.TokenStream, alignment: smiles.AtomAlignment, n_atoms: int,
                index: int = 0) -> StringView:
    positions = [-1] * n_atoms
    for j, token in enumerate(stream.atom_tokens):
        atom = alignment.mapping.get(token)
        if atom is None:
            raise AlignmentMissing(index)
        positions[atom] = stream.atom_symbols[j]
    if -1 in positions:
        raise AlignmentMissing(index)
    return StringView(stream.text, tuple(stream.vocabulary_ids), tuple(positions))


def views_from_enumeration(g: MolecularGraph, config: ModelConfig, seed: int,
                           labels: Optional[Dict[str, float]] = None,
                           vocab: Optional[Vocabulary] = None, source: str = '') -> MoleculeView:
    """Encoder and decoder strings drawn from random flattenings of g

    The two sets are disjoint whenever the molecule has enough distinct strings.
    """
    n_enc, n_dec = config.encoder_strings, config.decoder_strings
    total = n_enc if config.one_smiles_encdec_same else n_enc + n_dec
    views = []
    for i, (text, alignment) in enumerate(smiles.enumerate_random(g, seed, total)):
        views.append(string_view(smiles.tokenize(text, vocab), alignment, len(g), i))
    encoder = views[:n_enc]
    decoder = encoder if config.one_smiles_encdec_same else views[n_enc:]
    return MoleculeView(encoder, decoder, len(g), dict(labels or {}), source)


def views_from_parses(parses: Sequence[ParseResult], decoder: Optional[Sequence[ParseResult]] = None,
                      labels: Optional[Dict[str, float]] = None) -> MoleculeView:
    """Encoder inputs from user-supplied strings; homology through canonical ranks"""
    if not parses:
        raise EmptyTargets('no input strings')
    reference = parses[0].graph
    ref_ranks = molgraph.canonical_ranking(reference)
    ref_code = molgraph.canonical_code(reference, ref_ranks)

    def view(result: ParseResult, index: int) -> StringView:
        ranks = molgraph.canonical_ranking(result.graph)
        if molgraph.canonical_code(result.graph, ranks) != ref_code:
            raise MoleculeMismatch(index)
        if len(result.alignment) != len(result.graph):
            raise AlignmentMissing(index)
        homologous = smiles.AtomAlignment({token: ranks[atom] for token, atom in result.alignment.mapping.items()})
        return string_view(result.stream, homologous, len(result.graph), index)

    encoder = [view(p, i) for i, p in enumerate(parses)]
    decoded = [view(p, len(parses) + i) for i, p in enumerate(decoder)] if decoder else encoder
    return MoleculeView(encoder, decoded, len(reference), dict(labels or {}), parses[0].stream.text)


@dataclass
class EncoderBatch:
    """Padded (time, string) layout for M molecules with K strings each;
    string k of molecule m sits in column m*K + k"""
    ids: np.ndarray             # (T, B) int
    mask: np.ndarray            # (T, B) 1 on real symbols
    gather: np.ndarray          # (K, A) flat t*B + b of every atom occurrence
    scatter: np.ndarray         # (T, B) pooled row for atom positions
    atom_mask: np.ndarray       # (T, B) 1 on atom positions
    key_index: np.ndarray       # (M, A_max) pooled row per molecule atom
    key_mask: np.ndarray        # (M, A_max)
    molecules: int
    strings: int

    @classmethod
    def build(cls, views: Sequence[MoleculeView], pad_id: int = 0) -> 'EncoderBatch':
        k = len(views[0].encoder)
        if any(len(v.encoder) != k for v in views):
            raise ConfigError('every molecule needs the same number of encoder strings', key='encoder')
        columns = [s for v in views for s in v.encoder]
        steps, width = max(len(s.ids) for s in columns), len(columns)
        ids = np.full((steps, width), pad_id, dtype=np.int64)
        mask = np.zeros((steps, width))
        for b, s in enumerate(columns):
            ids[:len(s.ids), b] = s.ids
            mask[:len(s.ids), b] = 1.0

        total = sum(v.n_atoms for v in views)
        gather = np.zeros((k, total), dtype=np.int64)
        scatter = np.zeros((steps, width), dtype=np.int64)
        atom_mask = np.zeros((steps, width))
        a_max = max(v.n_atoms for v in views)
        key_index = np.zeros((len(views), a_max), dtype=np.int64)
        key_mask = np.zeros((len(views), a_max))
        row = 0
        for m, v in enumerate(views):
            for atom in range(v.n_atoms):
                for j, s in enumerate(v.encoder):
                    b, t = m * k + j, s.atom_positions[atom]
                    gather[j, row] = t * width + b
                    scatter[t, b] = row
                    atom_mask[t, b] = 1.0
                key_index[m, atom] = row
                key_mask[m, atom] = 1.0
                row += 1
        return cls(ids, mask, gather, scatter, atom_mask, key_index, key_mask, len(views), k)


# Model parameters

@dataclass(eq=False)
class EncoderBlock(Module):
    pool: PoolGateParams
    norm: LayerNormParams
    fwd: GruParams
    bwd: GruParams
    proj: Linear

    @classmethod
    def create(cls, width: int, embed: int, hidden: int, rng) -> 'EncoderBlock':
        return cls(PoolGateParams.create(width, rng), LayerNormParams.create(width),
                   GruParams.create(width + embed, hidden, rng), GruParams.create(width + embed, hidden, rng),
                   Linear.create(2 * hidden, width, rng))


@dataclass(eq=False)
class PosteriorLayer(Module):
    query: ReluNet
    attend: AttentionParams
    renorm: BatchRenorm
    out: Linear


@dataclass(eq=False)
class PropertyHead(Module):
    name: str
    kind: str
    linear: Linear


@dataclass
class EncoderOutput:
    states: Tensor              # (T, B, W) per string, per position
    atom_keys: Tensor           # (A, W) pooled per atom
    keys: Tensor                # (M, A_max, W)
    key_mask: np.ndarray
    final: Tensor               # (M, 2H) max-pooled over strings
    batch: EncoderBatch


@dataclass
class LatentHierarchy:
    z: List[Tensor]
    mu_q: List[Tensor]
    logvar_q: List[Tensor]
    mu_p: List[Tensor]
    logvar_p: List[Tensor]

    @property
    def layers(self) -> int:
        return len(self.z)

    def concat(self) -> Tensor:
        return T.concat(self.z, axis=-1) if len(self.z) > 1 else self.z[0]


class AllSmilesVae(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        config.validate()
        self.config = config
        self.vocab = vocab
        rng = generator(seed, 1)
        E, H, W, Q = config.embed_width, config.gru_hidden, config.gru_hidden, config.query_hidden
        D, V, Z = config.decoder_hidden, len(vocab), config.latent_size
        widths = config.latent_widths

        self.embed = Embedding.create(V, E, rng)
        self.in_fwd = GruParams.create(E, H, rng)
        self.in_bwd = GruParams.create(E, H, rng)
        self.in_proj = Linear.create(2 * H, W, rng)
        self.blocks = [EncoderBlock.create(W, E, H, rng) for _ in range(config.encoder_depth)]
        self.key_fwd = GruParams.create(W, H, rng)
        self.key_bwd = GruParams.create(W, H, rng)
        self.key_proj = Linear.create(2 * H, W, rng)
        self.key_pool = PoolGateParams.create(W, rng)
        self.z_fwd = GruParams.create(W, H, rng)
        self.z_bwd = GruParams.create(W, H, rng)

        self.top_renorm = BatchRenorm.create(2 * H)
        self.top_out = Linear.create(2 * H, 2 * widths[0], rng)
        self.posterior_layers = []
        self.prior_layers = []
        for i in range(1, len(widths)):
            prefix = sum(widths[:i])
            self.posterior_layers.append(PosteriorLayer(
                ReluNet.create(prefix, Q, Q, rng), AttentionParams.create(Q, W, Q, rng),
                BatchRenorm.create(W), Linear.create(W, 2 * widths[i], rng)))
            self.prior_layers.append(ReluNet.create(prefix, Q, 2 * widths[i], rng))

        self.dec_embed = Embedding.create(V, E, rng)
        self.dec_latent = Linear.create(Z, E, rng)
        self.dec_cell = ReluNet.create(Z, D, D, rng)
        self.dec_lstm = LstmParams.create(2 * E, D, rng)
        self.dec_out = Linear.create(D, V, rng)

        self.heads = [PropertyHead(name, kind, Linear.create(Z, 1, rng))
                      for name, kind in config.properties.items()]
        self.z_max_abs = np.ones(Z, dtype=np.float32)
        self.target_mean = np.zeros(len(self.heads), dtype=np.float32)
        self.target_std = np.ones(len(self.heads), dtype=np.float32)

    @property
    def renorms(self) -> List[BatchRenorm]:
        return [self.top_renorm] + [layer.renorm for layer in self.posterior_layers]

    def clamp_bounds(self) -> np.ndarray:
        return self.config.clamp_safety * self.z_max_abs


# Encoder

def _pool_write(p: PoolGateParams, h: Tensor, batch: EncoderBatch) -> Tensor:
    """Replace every atom position by the gated pool of its homologous positions"""
    steps, width = batch.ids.shape
    flat = h.reshape((steps * width, h.shape[-1]))
    pooled = nn.gated_pool(p, T.take(flat, batch.gather))
    spread = T.take(pooled, batch.scatter)
    keep = batch.atom_mask[..., None]
    return h * (1.0 - keep) + spread * keep


def encode(model: AllSmilesVae, views: Sequence[MoleculeView]) -> EncoderOutput:
    batch = EncoderBatch.build(views, model.vocab.pad_id)
    x = model.embed(batch.ids)
    states, _ = nn.bigru_encode(model.in_fwd, model.in_bwd, x, batch.mask)
    h = model.in_proj(states)
    for block in model.blocks:
        if not model.config.no_atom_pooling:
            h = _pool_write(block.pool, h, batch)
        h = block.norm(h)
        states, _ = nn.bigru_encode(block.fwd, block.bwd, T.concat([h, x], axis=-1), batch.mask)
        h = block.proj(states)

    key_states, _ = nn.bigru_encode(model.key_fwd, model.key_bwd, h, batch.mask)
    key_positions = model.key_proj(key_states)
    steps, width = batch.ids.shape
    flat = key_positions.reshape((steps * width, key_positions.shape[-1]))
    atom_keys = nn.gated_pool(model.key_pool, T.take(flat, batch.gather))

    _, (forward, backward) = nn.bigru_encode(model.z_fwd, model.z_bwd, h, batch.mask)
    per_string = T.concat([forward, backward], axis=-1)
    final = per_string.reshape((batch.molecules, batch.strings, per_string.shape[-1])).max(axis=1)
    return EncoderOutput(h, atom_keys, T.take(atom_keys, batch.key_index), batch.key_mask, final, batch)


# Latent hierarchy

def _split(params: Tensor) -> Tuple[Tensor, Tensor]:
    half = params.shape[-1] // 2
    return params[..., :half], params[..., half:]


def prior_params(model: AllSmilesVae, z_prefix: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
    """Gaussian parameters of the next layer given the layers before it"""
    widths = model.config.latent_widths
    i = len(z_prefix)
    if i == 0:
        return T.zeros((1, widths[0])), T.zeros((1, widths[0]))
    prefix = T.concat(list(z_prefix), axis=-1) if i > 1 else z_prefix[0]
    return _split(model.prior_layers[i - 1](prefix))


def posterior(model: AllSmilesVae, enc: EncoderOutput, noise: Optional[Sequence[np.ndarray]] = None,
              training: bool = False) -> LatentHierarchy:
    """Sample the hierarchy; noise None selects the mean of every layer"""
    widths = model.config.latent_widths
    m = enc.final.shape[0]
    h = LatentHierarchy([], [], [], [], [])
    for i, width in enumerate(widths):
        if i == 0:
            normed = nn.batch_renorm(model.top_renorm, enc.final, training)
            mu, logvar = _split(model.top_out(normed))
            mu_p, logvar_p = T.zeros((m, width)), T.zeros((m, width))
        else:
            layer = model.posterior_layers[i - 1]
            prefix = T.concat(h.z, axis=-1) if i > 1 else h.z[0]
            context = nn.attention(layer.attend, layer.query(prefix), enc.keys, enc.key_mask)
            mu, logvar = _split(layer.out(nn.batch_renorm(layer.renorm, context, training)))
            mu_p, logvar_p = prior_params(model, h.z)
        if noise is None:
            z = mu
        else:
            z = mu + T.exp(logvar * 0.5) * noise[i]
        h.z.append(z)
        h.mu_q.append(mu)
        h.logvar_q.append(logvar)
        h.mu_p.append(mu_p)
        h.logvar_p.append(logvar_p)
    return h


def gaussian_kl(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """KL[N(mu_q, var_q) || N(mu_p, var_p)] summed over the last axis"""
    ratio = (T.exp(logvar_q) + T.square(mu_q - mu_p)) / T.exp(logvar_p)
    return ((logvar_p - logvar_q + ratio - 1.0) * 0.5).sum(axis=-1)


def kl_term(h: LatentHierarchy, scale: float = 1.0) -> Tensor:
    """Per-layer analytic KL, summed over layers and averaged over molecules"""
    total = None
    for i in range(h.layers):
        layer = gaussian_kl(h.mu_q[i], h.logvar_q[i], h.mu_p[i], h.logvar_p[i])
        total = layer if total is None else total + layer
    return total.mean() * scale


def sample_prior(model: AllSmilesVae, n: int, rng: np.random.Generator) -> Tensor:
    """n joint draws of the hierarchy through the reparametrized prior"""
    z: List[Tensor] = []
    for width in model.config.latent_widths:
        eps = rng.standard_normal((n, width))
        mu, logvar = prior_params(model, z)
        z.append(mu + T.exp(logvar * 0.5) * eps)
    return T.concat(z, axis=-1) if len(z) > 1 else z[0]


# Decoder

@dataclass
class DecoderBatch:
    inputs: np.ndarray          # (T, R) previous token, eos first
    targets: np.ndarray         # (T, R)
    mask: np.ndarray            # (T, R)
    row_molecule: np.ndarray    # (R,)
    row_weight: np.ndarray      # (R,) 1 / (strings of molecule * molecules)

    @classmethod
    def build(cls, targets: Sequence[Sequence[Sequence[int]]], vocab: Vocabulary) -> 'DecoderBatch':
        if not targets or any(len(t) == 0 for t in targets):
            raise EmptyTargets('every molecule needs at least one target string')
        rows = [(m, ids) for m, strings in enumerate(targets) for ids in strings]
        steps = max(len(ids) for _, ids in rows)
        inputs = np.full((steps, len(rows)), vocab.pad_id, dtype=np.int64)
        out = np.full((steps, len(rows)), vocab.pad_id, dtype=np.int64)
        mask = np.zeros((steps, len(rows)))
        for r, (_, ids) in enumerate(rows):
            out[:len(ids), r] = ids
            inputs[0, r] = vocab.eos_id
            inputs[1:len(ids), r] = ids[:-1]
            mask[:len(ids), r] = 1.0
        molecule = np.array([m for m, _ in rows], dtype=np.int64)
        weight = np.array([1.0 / (len(targets[m]) * len(targets)) for m, _ in rows])
        return cls(inputs, out, mask, molecule, weight)


def decoder_start(model: AllSmilesVae, z: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """(latent input projection, h0, c0) for rows of z"""
    h0 = T.zeros((z.shape[0], model.config.decoder_hidden))
    return model.dec_latent(z), h0, model.dec_cell(z)


def decode_nll(model: AllSmilesVae, z: Tensor, targets: Sequence[Sequence[Sequence[int]]]) -> Tensor:
    """Teacher-forced negative log-likelihood

    targets[m] holds the vocabulary-id strings for molecule m (row m of z).
    Summed over tokens, averaged over strings, then over molecules.
    """
    batch = DecoderBatch.build(targets, model.vocab)
    latent, h, c = decoder_start(model, z)
    latent, c = T.take(latent, batch.row_molecule), T.take(c, batch.row_molecule)
    h = T.take(h, batch.row_molecule)
    hidden = []
    for t in range(batch.inputs.shape[0]):
        x_t = T.concat([model.dec_embed(batch.inputs[t]), latent], axis=-1)
        h, c = nn.lstm_step(model.dec_lstm, x_t, h, c)
        hidden.append(h)
    logp = T.log_softmax(model.dec_out(T.stack(hidden, axis=0)), axis=-1)
    picked = np.eye(len(model.vocab))[batch.targets] * (batch.mask * batch.row_weight)[..., None]
    return -(logp * picked).sum()


# Regressors

def property_outputs(model: AllSmilesVae, z: Tensor) -> Dict[str, Tensor]:
    """Head outputs on hard-tanh clamped z, in target units"""
    bounds = model.clamp_bounds()
    clamped = T.hard_tanh(z, -bounds, bounds)
    out = {}
    for i, head in enumerate(model.heads):
        raw = head.linear(clamped)
        raw = raw.reshape(raw.shape[:-1])
        if head.kind == LOGISTIC:
            out[head.name] = T.sigmoid(raw)
        else:
            out[head.name] = raw * float(model.target_std[i]) + float(model.target_mean[i])
    return out


def predict_property(model: AllSmilesVae, z) -> Dict[str, np.ndarray]:
    with T.no_grad():
        outputs = property_outputs(model, T.as_tensor(np.asarray(z, dtype=np.float64)))
    return {name: value.data.astype(np.float64) for name, value in outputs.items()}


def supervised_loss(model: AllSmilesVae, z: Tensor, views: Sequence[MoleculeView]) -> Tensor:
    """Squared error on standardized linear targets, cross-entropy on logistic ones"""
    bounds = model.clamp_bounds()
    clamped = T.hard_tanh(z, -bounds, bounds)
    total = T.zeros(())
    m = len(views)
    for i, head in enumerate(model.heads):
        values = np.array([v.labels.get(head.name, np.nan) for v in views], dtype=np.float64)
        labeled = ~np.isnan(values)
        if not labeled.any():
            continue
        raw = head.linear(clamped)
        raw = raw.reshape(raw.shape[:-1])
        weight = labeled / m
        target = np.where(labeled, values, 0.0)
        if head.kind == LOGISTIC:
            p = T.sigmoid(raw)
            bce = -(T.log(p) * target + T.log(1.0 - p) * (1.0 - target))
            total = total + (bce * weight).sum()
        else:
            standard = (target - model.target_mean[i]) / model.target_std[i]
            total = total + (T.square(raw - standard) * weight).sum()
    return total


# Objective

@dataclass
class ElboParts:
    recon: float
    kl: float
    kl_weight: float
    sup: float

    @property
    def total(self) -> float:
        return self.recon + self.kl_weight * self.kl + self.sup


def elbo(model: AllSmilesVae, views: Sequence[MoleculeView], rng: np.random.Generator,
         anneal_weight: float = 1.0, training: bool = True) -> Tuple[Tensor, ElboParts, LatentHierarchy]:
    """Negative ELBO plus supervised terms, averaged over the molecules in views"""
    enc = encode(model, views)
    noise = [rng.standard_normal((len(views), w)) for w in model.config.latent_widths]
    h = posterior(model, enc, noise, training=training)
    z = h.concat()
    recon = decode_nll(model, z, [[s.ids for s in v.decoder] for v in views])
    kl = kl_term(h, model.config.kl_scale)
    sup = supervised_loss(model, z, views)
    loss = recon + kl * anneal_weight + sup
    parts = ElboParts(recon.item(), kl.item(), float(anneal_weight), sup.item())
    return loss, parts, h


# Inference

def map_encode(model: AllSmilesVae, molecules: Sequence, seed: int = 0) -> np.ndarray:
    """Posterior means for SMILES strings or graphs, one row each"""
    views = []
    for item in molecules:
        g = smiles.parse(item).graph if isinstance(item, str) else item
        views.append(views_from_enumeration(g, model.config, seed, vocab=model.vocab))
    return map_encode_views(model, views)


def map_encode_views(model: AllSmilesVae, views: Sequence[MoleculeView]) -> np.ndarray:
    with T.no_grad():
        h = posterior(model, encode(model, views), noise=None, training=False)
        return h.concat().data.astype(np.float64)


@dataclass
class _Beam:
    score: float
    ids: Tuple[int, ...]
    state: object
    grammar: Optional[PdaState]


StepFn = Callable[[List[object], List[int]], Tuple[np.ndarray, List[object]]]


def beam_search(step: StepFn, start: object, width: int, eos_id: int, max_len: int = MAX_DECODE_LEN,
                grammar: Optional[GrammarMask] = None, exclude: Sequence[int] = (),
                render: Callable[[Tuple[int, ...]], object] = tuple) -> Tuple[Tuple[int, ...], float]:
    """Best eos-terminated sequence by total log-probability

    step(states, last_ids) returns (log-probs (n, V), next states) for n beams.
    No length normalization; equal scores go to the smaller render(ids).
    With a grammar mask every distribution is renormalized over the allowed ids, and ids
    after which the string could no longer close within max_len are masked too.
    """
    if width < 1:
        raise ConfigError('beam width must be at least 1', key='beam_width')
    alive = [_Beam(0.0, (), start, grammar.initial() if grammar else None)]
    finished: List[Tuple[float, Tuple[int, ...]]] = []
    for _ in range(max_len):
        logp, states = step([b.state for b in alive], [b.ids[-1] if b.ids else eos_id for b in alive])
        logp = np.array(logp, dtype=np.float64)
        if exclude:
            logp[:, list(exclude)] = -np.inf
        if grammar is not None:
            for i, beam in enumerate(alive):
                # only symbols whose closing completion still fits before max_len
                allowed = grammar.within(beam.grammar, max_len - len(beam.ids) - 1)
                logp[i, ~allowed] = -np.inf
                if allowed.any():
                    logp[i] -= np.logaddexp.reduce(logp[i, allowed])

        scores = np.array([b.score for b in alive])[:, None] + logp
        flat = np.flatnonzero(np.isfinite(scores))
        if flat.size == 0:
            break
        values = scores.reshape(-1)[flat]
        cutoff = np.sort(values)[::-1][min(width, values.size) - 1]
        pool = [(float(scores.reshape(-1)[f]), int(f) // logp.shape[1], int(f) % logp.shape[1])
                for f in flat[values >= cutoff]]
        pool.sort(key=lambda c: (-c[0], render(alive[c[1]].ids + (c[2],))))

        survivors = []
        for score, i, token in pool[:width]:
            ids = alive[i].ids + (token,)
            if token == eos_id:
                finished.append((score, ids))
                continue
            pda = grammar.advance(alive[i].grammar, token) if grammar else None
            survivors.append(_Beam(score, ids, states[i], pda))
        alive = survivors
        if not alive:
            break
        if finished and max(s for s, _ in finished) >= max(b.score for b in alive):
            break

    if not finished:
        raise MaxLengthExceeded(max_len)
    score, ids = min(finished, key=lambda f: (-f[0], render(f[1])))
    return ids, score


def _decoder_step(model: AllSmilesVae, latent: np.ndarray) -> StepFn:
    def step(states, last_ids):
        h = T.as_tensor(np.stack([s[0] for s in states]))
        c = T.as_tensor(np.stack([s[1] for s in states]))
        lat = T.as_tensor(np.repeat(latent[None, :], len(states), axis=0))
        x = T.concat([model.dec_embed(np.asarray(last_ids)), lat], axis=-1)
        h, c = nn.lstm_step(model.dec_lstm, x, h, c)
        logp = T.log_softmax(model.dec_out(h), axis=-1).data
        return logp, [(h.data[i], c.data[i]) for i in range(len(states))]
    return step


def beam_decode(model: AllSmilesVae, z, width: Optional[int] = None,
                grammar_mask: Optional[bool] = None, max_len: Optional[int] = None) -> str:
    """Decode one latent vector to a SMILES string"""
    config = model.config
    width = width or config.beam_width
    use_mask = config.grammar_mask_decoding if grammar_mask is None else grammar_mask
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    with T.no_grad():
        latent, h0, c0 = decoder_start(model, T.as_tensor(z))
        ids, _ = beam_search(
            _decoder_step(model, latent.data[0]), (h0.data[0], c0.data[0]), width,
            model.vocab.eos_id, max_len or config.max_decode_len,
            grammar=_grammar(model.vocab) if use_mask else None,
            exclude=(model.vocab.pad_id,), render=model.vocab.decode)
    return model.vocab.decode(ids)


_MASKS: Dict[int, GrammarMask] = {}


def _grammar(vocab: Vocabulary) -> GrammarMask:
    mask = _MASKS.get(id(vocab))
    if mask is None or mask.vocab is not vocab:
        mask = _MASKS[id(vocab)] = GrammarMask(vocab)
    return mask


def parses_ok(s: str) -> bool:
    try:
        smiles.parse(s)
    except (SmilesError, GraphError):
        return False
    return True


@dataclass
class SampleReport:
    strings: List[str] = field(default_factory=list)
    validity: float = 0.0
    uniqueness: float = 0.0
    novelty: float = 0.0

    def as_dict(self) -> dict:
        return {'n': len(self.strings), 'validity': self.validity,
                'uniqueness': self.uniqueness, 'novelty': self.novelty}


def sample_prior_and_decode(model: AllSmilesVae, n: int, seed: int,
                            grammar_mask: Optional[bool] = None, training_canonical=(),
                            width: Optional[int] = None) -> SampleReport:
    if n <= 0:
        return SampleReport()
    with T.no_grad():
        z = sample_prior(model, n, generator(seed, 2)).data
    strings, canonical = [], []
    for row in z:
        try:
            s = beam_decode(model, row, width, grammar_mask)
        except MaxLengthExceeded:
            s = ''
        strings.append(s)
        if s and parses_ok(s):
            canonical.append(smiles.canonical_smiles(s))
    known = set(training_canonical)
    report = SampleReport(strings, len(canonical) / n)
    if canonical:
        report.uniqueness = len(set(canonical)) / len(canonical)
        report.novelty = sum(c not in known for c in canonical) / len(canonical)
    logger.info(f"🧪 Sampled {n}: validity={report.validity:.3f} "
                f"uniqueness={report.uniqueness:.3f} novelty={report.novelty:.3f}")
    return report


def reconstruction_accuracy(model: AllSmilesVae, molecules: Sequence[str], width: Optional[int] = None,
                            seed: int = 0, batch_size: int = 32) -> float:
    """Fraction of molecules whose MAP code beam-decodes to the same molecule"""
    if not molecules:
        return 0.0
    hits = 0
    for start in range(0, len(molecules), batch_size):
        chunk = molecules[start:start + batch_size]
        for source, z in zip(chunk, map_encode(model, chunk, seed)):
            try:
                decoded = beam_decode(model, z, width)
            except MaxLengthExceeded:
                continue
            if parses_ok(decoded) and smiles.same_molecule(decoded, source):
                hits += 1
    return hits / len(molecules)


def mean_absolute_error(predicted: Sequence[float], true: Sequence[float]) -> float:
    return float(np.mean(np.abs(np.asarray(predicted, dtype=np.float64) - np.asarray(true, dtype=np.float64))))


def roc_auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Rank-sum AUC with average ranks for ties; nan with a single class"""
    frame = pd.DataFrame({'score': scores, 'label': np.asarray(labels, dtype=bool)})
    positives, negatives = int(frame.label.sum()), int((~frame.label).sum())
    if positives == 0 or negatives == 0:
        return float('nan')
    ranks = frame.score.rank(method='average')
    return float((ranks[frame.label].sum() - positives * (positives + 1) / 2) / (positives * negatives))
