import pytest

from allsmiles import corpus, gradcheck, settings, smiles, vae


def _corpus_lines():
    path = settings.PACKAGE_DIR / 'data' / 'sample_corpus.smi'
    lines = path.read_text(encoding='utf-8').splitlines()
    return [line.split('\t')[0] for line in lines if line.strip() and not line.startswith('#')]


@pytest.fixture(scope='session')
def corpus_smiles():
    return _corpus_lines()


@pytest.fixture
def micro_config():
    return gradcheck.micro_config()


@pytest.fixture
def micro_model(micro_config):
    return vae.AllSmilesVae(micro_config, gradcheck.micro_vocabulary(), seed=0)


@pytest.fixture
def micro_views(micro_model):
    return gradcheck.micro_views(micro_model.config, micro_model.vocab)


@pytest.fixture
def micro_molecules():
    out = []
    for i, text in enumerate(gradcheck.MICRO_MOLECULES, 1):
        g = smiles.parse(text).graph
        labels = {name: oracle(g) for name, oracle in corpus.PROPERTY_ORACLES.items()}
        out.append(corpus.Molecule(text, g, labels, i))
    return out


@pytest.fixture
def write_lines(tmp_path):
    def write(lines, name='corpus.smi'):
        path = tmp_path / name
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        return path
    return write
