#!/usr/bin/env python3
"""
Training loop and checkpoints
Minibatch ADAM on the negative ELBO with KL annealing and a per-epoch
exponential learning-rate decay. Checkpoints use the ASV1 container:
magic, little-endian uint32 header length, JSON header, float32 payload.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from allsmiles import nn, vae
from allsmiles import tensor as T
from allsmiles.corpus import Molecule
from allsmiles.errors import CheckpointFormatError, ConfigError, CorpusEmpty, NonFiniteLoss
from allsmiles.log import get_logger
from allsmiles.seeding import generator
from allsmiles.settings import from_mapping
from allsmiles.smiles import Vocabulary
from allsmiles.vae import AllSmilesVae, ModelConfig

logger = get_logger(__name__)

MAGIC = b'ASV1'
METRIC_COLUMNS = ['step', 'loss', 'recon', 'kl', 'sup', 'lr', 'anneal']


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.97
    renorm_warmup: int = 2000
    clip_norm: float = 0.0

    @classmethod
    def from_dict(cls, data) -> 'TrainConfig':
        return from_mapping(cls, data)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError('epochs must be >= 0 and batch_size >= 1', key='train')
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError('learning_rate must be > 0 and lr_decay in (0, 1]', key='train')


@dataclass
class TrainResult:
    model: AllSmilesVae
    metrics: pd.DataFrame
    step: int = 0
    epoch: int = 0


def anneal_weight(step: int, anneal_steps: int) -> float:
    """Linear 0 -> 1 ramp of the KL weight"""
    if anneal_steps <= 0:
        return 1.0
    return min(1.0, step / anneal_steps)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay ** epoch


def fit_target_scaling(model: AllSmilesVae, molecules: Sequence[Molecule]) -> None:
    """Standardize linear-head targets over the labelled molecules"""
    for i, head in enumerate(model.heads):
        if head.kind != vae.LINEAR:
            continue
        values = pd.Series([m.labels.get(head.name, np.nan) for m in molecules], dtype=float).dropna()
        if values.empty:
            continue
        std = float(values.std(ddof=0))
        model.target_mean[i] = float(values.mean())
        model.target_std[i] = std if std > 1e-8 else 1.0


def _enumeration_seeds(seed: int, epoch: int, n: int) -> np.ndarray:
    return generator(seed, 3, epoch).integers(0, 2 ** 62, size=n)


def train(model: AllSmilesVae, molecules: Sequence[Molecule], config: TrainConfig, seed: int,
          progress: bool = True, on_epoch=None) -> TrainResult:
    """Deterministic given the seed; raises NonFiniteLoss on a NaN/inf loss"""
    if not molecules:
        raise CorpusEmpty('training corpus is empty')
    fit_target_scaling(model, molecules)
    params = model.parameters()
    adam = nn.AdamState.create(params, lr=config.learning_rate)
    rows: List[Dict[str, float]] = []
    step = 0
    batches = math.ceil(len(molecules) / config.batch_size)
    logger.info(f"🚀 Training on {len(molecules)} molecules, {config.epochs} epochs x {batches} batches, "
                f"{model.parameter_count()} parameters")

    epochs = tqdm(range(config.epochs), desc='train', disable=not progress)
    for epoch in epochs:
        adam.lr = learning_rate(config, epoch)
        order = generator(seed, 2, epoch).permutation(len(molecules))
        enum_seeds = _enumeration_seeds(seed, epoch, len(molecules))
        epoch_loss = []
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            views = [vae.views_from_enumeration(molecules[i].graph, model.config, int(enum_seeds[i]),
                                                molecules[i].labels, model.vocab, molecules[i].smiles)
                     for i in chunk]
            for renorm in model.renorms:
                renorm.ramp(step, config.renorm_warmup)
            weight = anneal_weight(step, model.config.kl_anneal_steps)

            loss, parts, hierarchy = vae.elbo(model, views, generator(seed, 4, step), weight, training=True)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(step)
            model.zero_grad()
            T.backward(loss)
            grads, _ = nn.clip_global_norm([p.grad for p in params], config.clip_norm)
            nn.adam_step(params, grads, adam)

            z = np.abs(hierarchy.concat().data).max(axis=0)
            model.z_max_abs = np.maximum(model.z_max_abs, z).astype(np.float32)
            rows.append({'step': step, 'loss': value, 'recon': parts.recon, 'kl': parts.kl,
                         'sup': parts.sup, 'lr': adam.lr, 'anneal': weight})
            epoch_loss.append(value)
            step += 1
        mean_loss = float(np.mean(epoch_loss))
        epochs.set_postfix(loss=f'{mean_loss:.3f}')
        logger.debug(f"epoch {epoch}: loss={mean_loss:.4f} lr={adam.lr:.2e}")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)

    logger.info(f"✅ Training finished after {step} steps")
    return TrainResult(model, pd.DataFrame(rows, columns=METRIC_COLUMNS), step, config.epochs)


def write_metrics(metrics: pd.DataFrame, path: Union[str, Path]) -> None:
    metrics.to_csv(path, index=False, columns=METRIC_COLUMNS)


# Checkpoints

def save_checkpoint(model: AllSmilesVae, path: Union[str, Path], extras: Optional[dict] = None) -> None:
    tensors = nn.state_dict(model)
    manifest, payload, offset = {}, [], 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype='<f4')
        manifest[name] = {'shape': list(data.shape), 'offset': offset}
        payload.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({
        'config': model.config.to_dict(),
        'vocabulary': model.vocab.to_list(),
        'tensors': manifest,
        'extras': extras or {},
    }).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<I', len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)
    logger.info(f"💾 Checkpoint saved to {path} ({offset} payload bytes)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[AllSmilesVae, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 8:
        raise CheckpointFormatError(f'{path} is not an ASV1 checkpoint')
    (length,) = struct.unpack('<I', raw[4:8])
    try:
        header = json.loads(raw[8:8 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f'unreadable checkpoint header: {exc}') from None
    body = memoryview(raw)[8 + length:]

    tensors = {}
    for name, entry in header['tensors'].items():
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        start, end = entry['offset'], entry['offset'] + 4 * count
        if end > len(body):
            raise CheckpointFormatError(f'tensor {name} runs past the end of the payload')
        tensors[name] = np.frombuffer(body[start:end], dtype='<f4').reshape(shape).astype(np.float32)

    config = ModelConfig.from_dict(header['config'])
    model = AllSmilesVae(config, Vocabulary.from_list(header['vocabulary']))
    try:
        nn.load_state_dict(model, tensors)
    except KeyError as exc:
        raise CheckpointFormatError(f'checkpoint lacks tensor {exc}') from None
    return model, header.get('extras', {})


# Evaluation

def evaluate(model: AllSmilesVae, molecules: Sequence[Molecule], width: Optional[int] = None,
             seed: int = 0) -> Dict[str, float]:
    """Reconstruction accuracy plus MAE (linear heads) or AUC (logistic heads)"""
    texts = [m.smiles for m in molecules]
    summary = {'molecules': len(texts), 'reconstruction': vae.reconstruction_accuracy(model, texts, width, seed)}
    if not texts:
        return summary
    z = vae.map_encode(model, [m.graph for m in molecules], seed)
    predicted = vae.predict_property(model, z)
    for head in model.heads:
        true = np.array([m.labels.get(head.name, np.nan) for m in molecules], dtype=float)
        known = ~np.isnan(true)
        if not known.any():
            continue
        if head.kind == vae.LOGISTIC:
            summary[f'{head.name}_auc'] = vae.roc_auc(predicted[head.name][known], true[known])
        else:
            summary[f'{head.name}_mae'] = vae.mean_absolute_error(predicted[head.name][known], true[known])
    return summary
