import json

import pytest

from allsmiles import cli, corpus
from allsmiles.cli import RunConfig
from allsmiles.errors import ConfigError


def test_canon_prints_identical_lines(write_lines, capsys) -> None:
    assert cli.main(['canon', str(write_lines(['OCC', 'CCO']))]) == 0
    first, second = capsys.readouterr().out.splitlines()
    assert first == second


def test_validate_reports_line_and_error(write_lines, capsys) -> None:
    code = cli.main(['validate', str(write_lines(['CCO', 'C1CC']))])
    err = capsys.readouterr().err
    assert code == 1
    assert 'error=UnclosedRing' in err
    assert 'line=2' in err


def test_validate_clean_file(write_lines) -> None:
    assert cli.main(['validate', str(write_lines(['CCO', 'c1ccccc1']))]) == 0


def test_parse_prints_formula(write_lines, capsys) -> None:
    assert cli.main(['parse', str(write_lines(['CCO']))]) == 0
    assert capsys.readouterr().out.split('\t')[3].strip() == 'C2H6O'


def test_enum_is_seeded(write_lines, capsys) -> None:
    path = str(write_lines(['CC(=O)Nc1ccccc1']))
    cli.main(['enum', path, '--k', '4', '--seed', '7'])
    first = capsys.readouterr().out
    cli.main(['enum', path, '--k', '4', '--seed', '7'])
    assert capsys.readouterr().out == first
    assert len(first.splitlines()) == 4


def test_gen_corpus_writes_under_output_dir(tmp_path) -> None:
    out = tmp_path / 'out'
    assert cli.main(['--output-dir', str(out), '--no-progress', 'gen-corpus', '--n', '3', '--max-len', '20',
                     '--out', 'gen.smi']) == 0
    assert len(corpus.read_corpus(out / 'gen.smi')) == 3


def test_output_cannot_escape_output_dir(tmp_path, capsys) -> None:
    code = cli.main(['--output-dir', str(tmp_path), 'gen-corpus', '--n', '1', '--out', '../escape.smi'])
    assert code == 1
    assert 'error=ConfigError' in capsys.readouterr().err
    assert not (tmp_path.parent / 'escape.smi').exists()


def test_annulus_command(capsys) -> None:
    assert cli.main(['annulus', '--n', '64', '--samples', '200', '--seed', '1']) == 0
    assert 'within' in capsys.readouterr().out


def test_usage_error_exit_code() -> None:
    assert cli.main(['no-such-command']) == 2


def test_run_config_rejects_unknown_keys(tmp_path, capsys) -> None:
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'corpus': 'x.smi', 'epochs': 3}))
    with pytest.raises(ConfigError):
        RunConfig.load(path)
    assert cli.main(['train', '--config', str(path)]) == 1
    assert 'error=ConfigError' in capsys.readouterr().err


def test_run_config_checks_nested_sections(tmp_path) -> None:
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'model': {'latent_width': 0}}))
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_run_config_requires_existing_paths(tmp_path) -> None:
    config = RunConfig.from_dict({'corpus': str(tmp_path / 'missing.smi')})
    with pytest.raises(ConfigError):
        config.require('corpus')
    with pytest.raises(ConfigError):
        config.require('checkpoint')


def test_train_writes_artifacts(tmp_path, write_lines, capsys) -> None:
    data = write_lines(['CCO', 'CC(=O)O', 'c1ccccc1', 'CCN'])
    config = {
        'corpus': str(data),
        'seed': 1,
        'holdout': 1,
        'model': {'embed_width': 4, 'encoder_depth': 1, 'gru_hidden': 6, 'hierarchy_layers': 2,
                  'latent_width': 3, 'query_hidden': 4, 'decoder_hidden': 8, 'smiles_per_side': 2,
                  'beam_width': 1, 'max_decode_len': 30},
        'train': {'epochs': 1, 'batch_size': 2},
    }
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(config))
    out = tmp_path / 'run'
    assert cli.main(['--output-dir', str(out), '--no-progress', 'train', '--config', str(path)]) == 0
    for name in (cli.CHECKPOINT_FILE, cli.METRICS_FILE, cli.SUMMARY_FILE):
        assert (out / name).is_file()
    summary = json.loads((out / cli.SUMMARY_FILE).read_text())
    assert summary['steps'] == 2
    assert summary['holdout']['molecules'] == 1

    capsys.readouterr()
    assert cli.main(['encode', str(data), '--checkpoint', str(out / cli.CHECKPOINT_FILE)]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == 'smiles,' + ','.join(f'z{i}' for i in range(6))
    assert len(rows) == 5
