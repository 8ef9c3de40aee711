import numpy as np
import pytest

from allsmiles import nn
from allsmiles import tensor as T
from allsmiles.errors import EmptyKeys, EmptySequence, ShapeMismatch


def rng(seed=0):
    return np.random.default_rng(seed)


def test_gru_step_shape_and_range() -> None:
    p = nn.GruParams.create(3, 5, rng())
    h = nn.gru_step(p, T.as_tensor(rng(1).normal(size=(2, 3))), T.zeros((2, 5)))
    assert h.shape == (2, 5)
    assert np.all(np.abs(h.data) < 1.0)


def test_gru_step_rejects_bad_input() -> None:
    p = nn.GruParams.create(3, 5, rng())
    with pytest.raises(ShapeMismatch):
        nn.gru_step(p, T.zeros((2, 4)), T.zeros((2, 5)))


def test_masked_scan_matches_unpadded_sequence() -> None:
    p = nn.GruParams.create(2, 3, rng())
    seq = rng(2).normal(size=(4, 1, 2))
    padded = np.concatenate([seq, rng(3).normal(size=(2, 1, 2))], axis=0)
    mask = np.array([[1.0]] * 4 + [[0.0]] * 2)
    _, final = nn.gru_scan(p, T.as_tensor(seq))
    _, padded_final = nn.gru_scan(p, T.as_tensor(padded), mask)
    assert np.allclose(final.data, padded_final.data)
    states, back = nn.gru_scan(p, T.as_tensor(seq), reverse=True)
    _, padded_back = nn.gru_scan(p, T.as_tensor(padded), mask, reverse=True)
    assert np.allclose(back.data, padded_back.data)
    assert np.allclose(states.data[0], back.data)


def test_bigru_single_sequence() -> None:
    fwd, bwd = nn.GruParams.create(2, 3, rng()), nn.GruParams.create(2, 3, rng(1))
    out, (last_f, last_b) = nn.bigru_encode(fwd, bwd, T.as_tensor(rng(2).normal(size=(5, 2))))
    assert out.shape == (5, 6)
    assert np.allclose(out.data[-1, :3], last_f.data)
    assert np.allclose(out.data[0, 3:], last_b.data)
    with pytest.raises(EmptySequence):
        nn.bigru_encode(fwd, bwd, T.zeros((0, 2)))


def test_lstm_step_shapes() -> None:
    p = nn.LstmParams.create(4, 3, rng())
    h, c = nn.lstm_step(p, T.zeros((2, 4)), T.zeros((2, 3)), T.zeros((2, 3)))
    assert h.shape == c.shape == (2, 3)
    assert np.allclose(p.b_f.data, 1.0)


def test_attention_weights() -> None:
    p = nn.AttentionParams.create(3, 4, 5, rng())
    q = T.as_tensor(rng(1).normal(size=(2, 3)))
    keys = T.as_tensor(rng(2).normal(size=(2, 3, 4)))
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]])
    context, alpha = nn.attention(p, q, keys, mask, return_weights=True)
    assert context.shape == (2, 4)
    assert np.allclose(alpha.data.sum(axis=-1), 1.0)
    assert alpha.data[1, 1] < 1e-12
    assert np.allclose(context.data[1], keys.data[1, 0])


def test_attention_unbatched_and_empty() -> None:
    p = nn.AttentionParams.create(3, 4, 5, rng())
    context = nn.attention(p, T.zeros(3), T.as_tensor(rng(1).normal(size=(6, 4))))
    assert context.shape == (4,)
    with pytest.raises(EmptyKeys):
        nn.attention(p, T.zeros(3), T.zeros((0, 4)))


def test_gated_pool_ignores_string_order() -> None:
    p = nn.PoolGateParams.create(4, rng())
    reps = rng(1).normal(size=(3, 5, 4))
    a = nn.gated_pool(p, T.as_tensor(reps)).data
    b = nn.gated_pool(p, T.as_tensor(reps[::-1].copy())).data
    assert a.shape == (5, 4)
    assert np.allclose(a, b, atol=1e-6)


def test_layer_norm_statistics() -> None:
    p = nn.LayerNormParams.create(8)
    out = p(T.as_tensor(rng().normal(3.0, 5.0, size=(4, 8)))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_batch_renorm_is_batch_norm_before_ramp() -> None:
    state = nn.BatchRenorm.create(3)
    x = rng().normal(2.0, 3.0, size=(16, 3))
    out = nn.batch_renorm(state, T.as_tensor(x), training=True).data
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-4)
    assert not np.allclose(state.running_mean, 0.0)
    assert state.running_mean.dtype == np.float32


def test_batch_renorm_inference_uses_running_stats() -> None:
    state = nn.BatchRenorm.create(2)
    state.running_mean = np.array([1.0, -1.0], dtype=np.float32)
    state.running_var = np.array([4.0, 4.0], dtype=np.float32)
    out = nn.batch_renorm(state, T.as_tensor([[3.0, 1.0]]), training=False).data
    assert np.allclose(out, [[1.0, 1.0]], atol=1e-4)


def test_renorm_ramp() -> None:
    state = nn.BatchRenorm.create(2)
    state.ramp(0, 100)
    assert (state.r_max, state.d_max) == (1.0, 0.0)
    state.ramp(50, 100)
    assert state.r_max == pytest.approx(2.0)
    assert state.d_max == pytest.approx(2.5)
    state.ramp(500, 100)
    assert (state.r_max, state.d_max) == (3.0, 5.0)


def test_adam_first_step_moves_by_learning_rate() -> None:
    p = T.parameter(np.array([1.0, -1.0]))
    state = nn.AdamState.create([p], lr=0.01)
    nn.adam_step([p], [np.array([2.0, -0.5])], state)
    assert np.allclose(p.data, [0.99, -0.99], atol=1e-6)
    assert state.step == 1


def test_adam_minimizes_quadratic() -> None:
    with T.precision(np.float64):
        p = T.parameter(np.array([3.0, -2.0]))
        state = nn.AdamState.create([p], lr=0.1)
        for _ in range(500):
            p.grad = None
            grads = T.backward(T.square(p).sum(), wrt=[p])
            nn.adam_step([p], grads, state)
    assert np.all(np.abs(p.data) < 0.05)


def test_adam_shape_check() -> None:
    p = T.parameter(np.zeros(2))
    with pytest.raises(ShapeMismatch):
        nn.adam_step([p], [np.zeros(3)], nn.AdamState.create([p]))


def test_clip_global_norm() -> None:
    grads, total = nn.clip_global_norm([np.array([3.0]), np.array([4.0]), None], 1.0)
    assert total == pytest.approx(5.0)
    assert np.allclose(grads[0], [0.6]) and np.allclose(grads[1], [0.8])
    assert grads[2] is None
    same, _ = nn.clip_global_norm([np.array([3.0])], 0.0)
    assert np.allclose(same[0], [3.0])


def test_frozen_restores_flags() -> None:
    layer = nn.Linear.create(2, 2, rng())
    layer.b.requires_grad = False
    with layer.frozen():
        with layer.frozen():
            assert not any(p.requires_grad for p in layer.parameters())
        assert not layer.W.requires_grad
    assert layer.W.requires_grad
    assert not layer.b.requires_grad


def test_state_dict_round_trip() -> None:
    source, target = nn.ReluNet.create(3, 4, 2, rng(0)), nn.ReluNet.create(3, 4, 2, rng(1))
    nn.load_state_dict(target, nn.state_dict(source))
    for (name, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
        assert np.array_equal(a.data, b.data), name
    assert [name for name, _ in source.named_parameters()] == ['hidden.W', 'hidden.b', 'out.W', 'out.b']


def test_load_state_dict_errors() -> None:
    layer = nn.Linear.create(2, 3, rng())
    with pytest.raises(KeyError):
        nn.load_state_dict(layer, {'W': np.zeros((2, 3))})
    with pytest.raises(ShapeMismatch):
        nn.load_state_dict(layer, {'W': np.zeros((3, 2)), 'b': np.zeros(3)})


def test_buffers_are_listed() -> None:
    state = nn.BatchRenorm.create(2)
    assert [name for name, _ in state.named_buffers()] == ['running_mean', 'running_var']
