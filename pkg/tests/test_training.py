import numpy as np
import pytest

from allsmiles import gradcheck, nn, training, vae
from allsmiles.errors import CheckpointFormatError, ConfigError, CorpusEmpty, NonFiniteLoss
from allsmiles.training import TrainConfig


def fresh_model(seed=0):
    return vae.AllSmilesVae(gradcheck.micro_config(), gradcheck.micro_vocabulary(), seed)


def test_anneal_weight_ramp() -> None:
    assert training.anneal_weight(0, 100) == 0.0
    assert training.anneal_weight(25, 100) == pytest.approx(0.25)
    assert training.anneal_weight(400, 100) == 1.0
    assert training.anneal_weight(3, 0) == 1.0


def test_learning_rate_decay() -> None:
    config = TrainConfig(learning_rate=0.01, lr_decay=0.5)
    assert training.learning_rate(config, 0) == pytest.approx(0.01)
    assert training.learning_rate(config, 3) == pytest.approx(0.00125)


def test_train_config_validation() -> None:
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'batch_size': 0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'epochs': 1, 'momentum': 0.9})


def test_target_scaling(micro_molecules) -> None:
    model = fresh_model()
    training.fit_target_scaling(model, micro_molecules)
    weights = [m.labels['mw'] for m in micro_molecules]
    assert model.target_mean[0] == pytest.approx(np.mean(weights), rel=1e-5)
    assert model.target_std[0] == pytest.approx(np.std(weights), rel=1e-5)
    # logistic heads keep the identity scaling
    assert model.target_mean[2] == 0.0 and model.target_std[2] == 1.0


def test_train_logs_every_step(micro_molecules) -> None:
    model = fresh_model()
    result = training.train(model, micro_molecules, TrainConfig(epochs=2, batch_size=2), seed=5, progress=False)
    assert result.step == 4
    assert list(result.metrics.columns) == training.METRIC_COLUMNS
    assert len(result.metrics) == 4
    assert np.isfinite(result.metrics['loss']).all()
    assert result.metrics['lr'].iloc[-1] == pytest.approx(1e-3 * 0.97)
    assert (model.z_max_abs >= 1.0).all()


def test_training_is_deterministic(micro_molecules) -> None:
    config = TrainConfig(epochs=1, batch_size=3)
    first = training.train(fresh_model(), micro_molecules, config, seed=11, progress=False)
    second = training.train(fresh_model(), micro_molecules, config, seed=11, progress=False)
    assert first.metrics.equals(second.metrics)
    for (name, a), (_, b) in zip(first.model.named_parameters(), second.model.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_training_moves_parameters(micro_molecules) -> None:
    model = fresh_model()
    before = model.dec_out.W.data.copy()
    training.train(model, micro_molecules, TrainConfig(epochs=1, batch_size=3), seed=0, progress=False)
    assert not np.array_equal(before, model.dec_out.W.data)


def test_empty_corpus() -> None:
    with pytest.raises(CorpusEmpty):
        training.train(fresh_model(), [], TrainConfig(epochs=1), seed=0, progress=False)


def test_non_finite_loss(micro_molecules) -> None:
    model = fresh_model()
    model.dec_out.b.data[:] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        training.train(model, micro_molecules, TrainConfig(epochs=1), seed=0, progress=False)
    assert info.value.step == 0


def test_checkpoint_round_trip(tmp_path, micro_molecules, micro_views) -> None:
    model = fresh_model(3)
    training.train(model, micro_molecules, TrainConfig(epochs=1, batch_size=3), seed=2, progress=False)
    path = tmp_path / 'model.asv'
    training.save_checkpoint(model, path, {'step': 1})
    loaded, extras = training.load_checkpoint(path)

    assert extras == {'step': 1}
    assert loaded.config == model.config
    assert loaded.vocab == model.vocab
    original, restored = nn.state_dict(model), nn.state_dict(loaded)
    assert original.keys() == restored.keys()
    for name in original:
        assert np.array_equal(original[name], restored[name]), name
    assert np.array_equal(vae.map_encode_views(model, micro_views), vae.map_encode_views(loaded, micro_views))


def test_checkpoint_header_layout(tmp_path) -> None:
    path = tmp_path / 'model.asv'
    training.save_checkpoint(fresh_model(), path)
    raw = path.read_bytes()
    assert raw[:4] == b'ASV1'
    length = int.from_bytes(raw[4:8], 'little')
    assert raw[8:8 + length].startswith(b'{')


def test_bad_checkpoints(tmp_path) -> None:
    bad = tmp_path / 'bad.asv'
    bad.write_bytes(b'NOPE' + b'\x00' * 8)
    with pytest.raises(CheckpointFormatError):
        training.load_checkpoint(bad)

    path = tmp_path / 'short.asv'
    training.save_checkpoint(fresh_model(), path)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointFormatError):
        training.load_checkpoint(path)


def test_write_metrics(tmp_path, micro_molecules) -> None:
    result = training.train(fresh_model(), micro_molecules[:1], TrainConfig(epochs=1), seed=0, progress=False)
    path = tmp_path / 'metrics.csv'
    training.write_metrics(result.metrics, path)
    assert path.read_text().splitlines()[0] == ','.join(training.METRIC_COLUMNS)


def test_evaluate_reports_head_metrics(micro_molecules) -> None:
    summary = training.evaluate(fresh_model(), micro_molecules, width=1)
    assert summary['molecules'] == 3
    assert 0.0 <= summary['reconstruction'] <= 1.0
    assert 'mw_mae' in summary and 'rings_mae' in summary
    assert 'aromatic_auc' in summary
