#!/usr/bin/env python3
"""
Neural Building Blocks
GRU, BiGRU, LSTM, additive attention, gated atom pooling, layer norm, batch
renormalization and ADAM, written on top of allsmiles.tensor.

Row-vector convention throughout: a step maps x (batch, in) with x @ W.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from allsmiles import tensor as T
from allsmiles.errors import EmptyKeys, EmptySequence, ShapeMismatch
from allsmiles.tensor import Tensor

MASK_FILL = -1e9


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def _zeros(shape) -> Tensor:
    return T.parameter(np.zeros(shape))


class Module:
    """Parameter container: Tensor attributes are parameters, numpy arrays are
    buffers, nested Modules (or lists of them) recurse."""

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f'{prefix}{name}'
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + '.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{path}.{i}.')

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            path = f'{prefix}{name}'
            if isinstance(value, np.ndarray):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_buffers(path + '.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f'{path}.{i}.')

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        owner, name = self._resolve(path)
        setattr(owner, name, np.array(value))

    def _resolve(self, path: str):
        owner = self
        parts = path.split('.')
        for part in parts[:-1]:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        return owner, parts[-1]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @contextmanager
    def frozen(self):
        """Parameters act as constants inside the block"""
        params = self.parameters()
        previous = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, previous):
                p.requires_grad = flag


# Parameter records

@dataclass(eq=False)
class Linear(Module):
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator) -> 'Linear':
        return cls(_uniform(rng, n_in, (n_in, n_out)), _zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


@dataclass(eq=False)
class ReluNet(Module):
    """One hidden layer of rectified linear units"""
    hidden: Linear
    out: Linear

    @classmethod
    def create(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> 'ReluNet':
        return cls(Linear.create(n_in, n_hidden, rng), Linear.create(n_hidden, n_out, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.relu(self.hidden(x)))


@dataclass(eq=False)
class Embedding(Module):
    table: Tensor

    @classmethod
    def create(cls, vocab_size: int, width: int, rng: np.random.Generator) -> 'Embedding':
        return cls(_uniform(rng, width, (vocab_size, width)))

    def __call__(self, ids) -> Tensor:
        return T.take(self.table, ids)


@dataclass(eq=False)
class GruParams(Module):
    W_r: Tensor
    W_z: Tensor
    W: Tensor
    U_r: Tensor
    U_z: Tensor
    U: Tensor
    b_r: Tensor
    b_z: Tensor
    b_h: Tensor

    @classmethod
    def create(cls, n_in: int, hidden: int, rng: np.random.Generator) -> 'GruParams':
        return cls(
            _uniform(rng, n_in, (n_in, hidden)), _uniform(rng, n_in, (n_in, hidden)),
            _uniform(rng, n_in, (n_in, hidden)),
            _uniform(rng, hidden, (hidden, hidden)), _uniform(rng, hidden, (hidden, hidden)),
            _uniform(rng, hidden, (hidden, hidden)),
            _zeros(hidden), _zeros(hidden), _zeros(hidden),
        )

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


@dataclass(eq=False)
class LstmParams(Module):
    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_c: Tensor
    U_f: Tensor
    U_i: Tensor
    U_o: Tensor
    U_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor

    @classmethod
    def create(cls, n_in: int, hidden: int, rng: np.random.Generator) -> 'LstmParams':
        W = [_uniform(rng, n_in, (n_in, hidden)) for _ in range(4)]
        U = [_uniform(rng, hidden, (hidden, hidden)) for _ in range(4)]
        forget = T.parameter(np.ones(hidden))
        return cls(*W, *U, forget, _zeros(hidden), _zeros(hidden), _zeros(hidden))

    @property
    def hidden(self) -> int:
        return self.U_c.shape[0]


@dataclass(eq=False)
class AttentionParams(Module):
    W_a: Tensor
    U_a: Tensor
    v: Tensor

    @classmethod
    def create(cls, query: int, key: int, hidden: int, rng: np.random.Generator) -> 'AttentionParams':
        return cls(_uniform(rng, query, (query, hidden)), _uniform(rng, key, (key, hidden)),
                   _uniform(rng, hidden, (hidden,)))


@dataclass(eq=False)
class PoolGateParams(Module):
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, width: int, rng: np.random.Generator) -> 'PoolGateParams':
        return cls(_uniform(rng, 2 * width, (2 * width, width)), _zeros(width))

    @property
    def width(self) -> int:
        return self.b.shape[0]


@dataclass(eq=False)
class LayerNormParams(Module):
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, width: int) -> 'LayerNormParams':
        return cls(T.parameter(np.ones(width)), _zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


# Recurrent blocks

def _check(op: str, x: Tensor, expected: int, *others: Tensor) -> None:
    if x.shape[-1] != expected:
        raise ShapeMismatch(op, x.shape, *[o.shape for o in others])


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """h_t = (1 - z) * h_prev + z * tanh(x W + (r * h_prev) U + b_h)"""
    _check('gru_step', x_t, p.W.shape[0], p.W)
    _check('gru_step', h_prev, p.hidden, p.U)
    r = T.sigmoid(x_t @ p.W_r + h_prev @ p.U_r + p.b_r)
    z = T.sigmoid(x_t @ p.W_z + h_prev @ p.U_z + p.b_z)
    candidate = T.tanh(x_t @ p.W + (r * h_prev) @ p.U + p.b_h)
    return (1.0 - z) * h_prev + z * candidate


def lstm_step(p: LstmParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
    _check('lstm_step', x_t, p.W_c.shape[0], p.W_c)
    _check('lstm_step', h_prev, p.hidden, p.U_c)
    _check('lstm_step', c_prev, p.hidden, p.U_c)
    f = T.sigmoid(x_t @ p.W_f + h_prev @ p.U_f + p.b_f)
    i = T.sigmoid(x_t @ p.W_i + h_prev @ p.U_i + p.b_i)
    o = T.sigmoid(x_t @ p.W_o + h_prev @ p.U_o + p.b_o)
    c_t = f * c_prev + i * T.tanh(x_t @ p.W_c + h_prev @ p.U_c + p.b_c)
    return o * T.tanh(c_t), c_t


def gru_scan(p: GruParams, xs: Tensor, mask: Optional[np.ndarray] = None,
             reverse: bool = False, h0: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Run a GRU over xs (time, batch, in)

    Where mask[t, b] is 0 the state is carried unchanged, so right-padded rows
    give the same states as their unpadded sequence in either direction.
    Returns (states (time, batch, hidden), final state (batch, hidden)).
    """
    steps, batch = xs.shape[0], xs.shape[1]
    if steps == 0:
        raise EmptySequence('cannot run a GRU over an empty sequence')
    h = h0 if h0 is not None else T.zeros((batch, p.hidden))
    states: List[Optional[Tensor]] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h_new = gru_step(p, xs[t], h)
        if mask is not None and not mask[t].all():
            m = mask[t].astype(h_new.data.dtype)[:, None]
            h_new = h_new * m + h * (1.0 - m)
        h = h_new
        states[t] = h
    return T.stack(states, axis=0), h


def bigru_encode(fwd: GruParams, bwd: GruParams, seq: Tensor,
                 mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """Positionwise [forward state, backward state]

    seq is (time, in) for one string or (time, batch, in) for a padded batch.
    """
    if seq.shape[0] == 0:
        raise EmptySequence('cannot encode an empty sequence')
    single = seq.ndim == 2
    if single:
        seq = seq.reshape((seq.shape[0], 1, seq.shape[1]))
    forward_states, forward_final = gru_scan(fwd, seq, mask)
    backward_states, backward_final = gru_scan(bwd, seq, mask, reverse=True)
    out = T.concat([forward_states, backward_states], axis=-1)
    if single:
        out = out.reshape((out.shape[0], out.shape[2]))
        forward_final = forward_final.reshape((fwd.hidden,))
        backward_final = backward_final.reshape((bwd.hidden,))
    return out, (forward_final, backward_final)


# Attention and pooling

def attention(p: AttentionParams, q: Tensor, keys: Tensor,
              key_mask: Optional[np.ndarray] = None, return_weights: bool = False):
    """Additive attention: e_i = tanh(q W_a + k_i U_a) . v, context = sum_i softmax(e)_i k_i

    q is (query,) with keys (n, key), or batched (batch, query) with (batch, n, key).
    """
    if keys.shape[-2] == 0:
        raise EmptyKeys('attention needs at least one key')
    _check('attention', q, p.W_a.shape[0], p.W_a)
    _check('attention', keys, p.U_a.shape[0], p.U_a)
    projected = q @ p.W_a
    projected = projected.reshape(projected.shape[:-1] + (1, projected.shape[-1]))
    scores = T.tanh(projected + keys @ p.U_a) @ p.v.reshape((p.v.shape[0], 1))
    scores = scores.reshape(scores.shape[:-1])
    if key_mask is not None:
        scores = scores + T.as_tensor((1.0 - key_mask) * MASK_FILL)
    alpha = T.softmax(scores, axis=-1)
    context = (alpha.reshape(alpha.shape + (1,)) * keys).sum(axis=-2)
    return (context, alpha) if return_weights else context


def gated_pool(p: PoolGateParams, reps: Tensor) -> Tensor:
    """Mean over the first axis of a_k * sigmoid([a_k, mean_k a_k] W + b)

    reps is (k, ..., width); the first axis indexes the SMILES strings.
    """
    width = p.width
    if reps.shape[-1] != width:
        raise ShapeMismatch('gated_pool', reps.shape, p.W.shape)
    mean = reps.mean(axis=0, keepdims=True)
    gate = T.sigmoid(reps @ p.W[:width] + mean @ p.W[width:] + p.b)
    return (reps * gate).mean(axis=0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = T.square(centered).mean(axis=-1, keepdims=True)
    return centered / T.sqrt(variance + epsilon) * gain + bias


# Batch renormalization

@dataclass(eq=False)
class BatchRenorm(Module):
    gain: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5
    r_max: float = 1.0
    d_max: float = 0.0

    @classmethod
    def create(cls, width: int, **kwargs) -> 'BatchRenorm':
        return cls(T.parameter(np.ones(width)), _zeros(width),
                   np.zeros(width, dtype=np.float32), np.ones(width, dtype=np.float32), **kwargs)

    def ramp(self, step: int, warmup: int, r_final: float = 3.0, d_final: float = 5.0) -> None:
        """Widen the correction clips linearly from plain batch norm"""
        frac = 1.0 if warmup <= 0 else min(1.0, step / warmup)
        self.r_max = 1.0 + (r_final - 1.0) * frac
        self.d_max = d_final * frac


def batch_renorm(state: BatchRenorm, batch: Tensor, training: bool, update: bool = True) -> Tensor:
    """Normalize (batch, width) rows; r and d are treated as constants"""
    run_sigma = np.sqrt(state.running_var + state.epsilon)
    if not training:
        normalized = (batch - state.running_mean) / run_sigma
        return normalized * state.gain + state.bias

    mean = batch.mean(axis=0, keepdims=True)
    centered = batch - mean
    variance = T.square(centered).mean(axis=0, keepdims=True)
    sigma = T.sqrt(variance + state.epsilon)
    r = np.clip(sigma.data.reshape(-1) / run_sigma, 1.0 / state.r_max, state.r_max)
    d = np.clip((mean.data.reshape(-1) - state.running_mean) / run_sigma, -state.d_max, state.d_max)
    normalized = centered / sigma * r + d

    if update:
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean.data.reshape(-1)).astype(np.float32)
        state.running_var = (m * state.running_var + (1 - m) * variance.data.reshape(-1)).astype(np.float32)
    return normalized * state.gain + state.bias


# Optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[Tensor], lr: float = 1e-3, **kwargs) -> 'AdamState':
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> None:
    """Bias-corrected ADAM descent step, applied in place"""
    if len(params) != len(state.m):
        raise ShapeMismatch('adam_step', (len(params),), (len(state.m),))
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatch('adam_step', p.shape, g.shape)
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


def clip_global_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float
                     ) -> Tuple[List[Optional[np.ndarray]], float]:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None)))
    if max_norm <= 0 or total <= max_norm:
        return list(grads), total
    scale = max_norm / (total + 1e-12)
    return [None if g is None else g * scale for g in grads], total


def state_dict(module: Module) -> Dict[str, np.ndarray]:
    out = {name: p.data for name, p in module.named_parameters()}
    out.update({name: b for name, b in module.named_buffers()})
    return out


def load_state_dict(module: Module, tensors: Dict[str, np.ndarray]) -> None:
    for name, p in module.named_parameters():
        if name not in tensors:
            raise KeyError(name)
        if tensors[name].shape != p.shape:
            raise ShapeMismatch('load', p.shape, tensors[name].shape)
        p.data = np.array(tensors[name], dtype=p.data.dtype)
    for name, _ in list(module.named_buffers()):
        if name in tensors:
            module.set_buffer(name, np.asarray(tensors[name], dtype=np.float32))
