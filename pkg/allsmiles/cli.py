#!/usr/bin/env python3
"""
Command-line interface
`python -m allsmiles <subcommand>`; results go to stdout or to files under
--output-dir, logs and one-line errors go to stderr.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from allsmiles import corpus, gradcheck, latentopt, molgraph, smiles, training, vae
from allsmiles.errors import AllSmilesError, ConfigError
from allsmiles.latentopt import OptConfig
from allsmiles.log import get_logger, setup_logging
from allsmiles.seeding import generator
from allsmiles.settings import from_mapping
from allsmiles.training import TrainConfig
from allsmiles.vae import ModelConfig

logger = get_logger(__name__)

CHECKPOINT_FILE = 'checkpoint.asv'
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
REPORT_FILE = 'report.csv'
SLICE_FILE = 'slice.csv'


@dataclass
class RunConfig:
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    output_dir: str = '.'
    seed: int = 0
    holdout: int = 0
    label_missing: bool = True
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    opt: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data) -> 'RunConfig':
        return from_mapping(cls, data)

    @classmethod
    def load(cls, path) -> 'RunConfig':
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f'config file {path} does not exist', key='config')
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as exc:
            raise ConfigError(f'config {path} is not valid JSON: {exc}', key='config') from None
        if not isinstance(data, dict):
            raise ConfigError('config must be a JSON object', key='config')
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.holdout < 0:
            raise ConfigError('holdout must be >= 0', key='holdout')
        # nested sections are checked eagerly so bad keys fail before any work
        self.model_config()
        self.train_config()
        self.opt_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def opt_config(self) -> OptConfig:
        return OptConfig.from_dict(self.opt)

    def require(self, *names: str) -> None:
        """Existence checks for input paths, run before any work starts"""
        for name in names:
            value = getattr(self, name)
            if not value:
                raise ConfigError(f'{name} is required for this command', key=name)
            if value != '-' and not Path(value).is_file():
                raise ConfigError(f'{name} {value} does not exist', key=name)


# Output helpers

def _output_dir(args, config: Optional[RunConfig] = None) -> Path:
    chosen = args.output_dir or (config.output_dir if config else None) or '.'
    path = Path(chosen)
    if path.exists() and not path.is_dir():
        raise ConfigError(f'output dir {path} is not a directory', key='output_dir')
    path.mkdir(parents=True, exist_ok=True)
    return path


def _inside(directory: Path, name: str) -> Path:
    target = (directory / name).resolve()
    if directory.resolve() not in target.parents:
        raise ConfigError(f'{name} would be written outside {directory}', key='output')
    return target


def _emit_frame(frame: pd.DataFrame, args, name: Optional[str]) -> None:
    if name:
        path = _inside(_output_dir(args), name)
        frame.to_csv(path, index=False)
        logger.info(f"💾 Wrote {len(frame)} rows to {path}")
    else:
        frame.to_csv(sys.stdout, index=False)


def _report_error(error: AllSmilesError, **extra) -> None:
    print(error.one_line(**extra), file=sys.stderr)


def _load_model(path: str):
    if not Path(path).is_file():
        raise ConfigError(f'checkpoint {path} does not exist', key='checkpoint')
    model, _ = training.load_checkpoint(path)
    return model


# Subcommands

def cmd_parse(args) -> int:
    molecules, errors = corpus.scan_corpus(args.file)
    for m in molecules:
        print(f"{m.line}\t{m.smiles}\t{len(m.graph)}\t{molgraph.formula(m.graph)}")
    for e in errors:
        _report_error(e.error, line=e.line)
    return 1 if errors else 0


def cmd_canon(args) -> int:
    molecules, errors = corpus.scan_corpus(args.file)
    for m in molecules:
        print(smiles.write_canonical(m.graph))
    for e in errors:
        _report_error(e.error, line=e.line)
    return 1 if errors else 0


def cmd_enum(args) -> int:
    molecules, errors = corpus.scan_corpus(args.file)
    for m in molecules:
        for text, _ in smiles.enumerate_random(m.graph, args.seed + m.line, args.k):
            print(f"{m.line}\t{text}")
    for e in errors:
        _report_error(e.error, line=e.line)
    return 1 if errors else 0


def cmd_validate(args) -> int:
    molecules, errors = corpus.scan_corpus(args.file)
    for e in errors:
        _report_error(e.error, line=e.line)
    logger.info(f"{'❌' if errors else '✅'} {len(molecules)} valid, {len(errors)} invalid lines")
    return 1 if errors else 0


def cmd_gen_corpus(args) -> int:
    frame = corpus.generate_corpus(args.n, args.max_len, args.seed, progress=args.progress)
    if args.out:
        path = _inside(_output_dir(args), args.out)
        corpus.write_corpus(frame, path)
        logger.info(f"💾 Wrote {len(frame)} molecules to {path}")
    else:
        corpus.write_corpus(frame, '-')
    return 0


def cmd_diameter_stats(args) -> int:
    stats = corpus.diameter_stats(corpus.read_corpus(args.file))
    print(f"count\t{stats['count']}\nmean\t{stats['mean']:.2f}\nmax\t{stats['max']}")
    return 0


def _split_corpus(config: RunConfig):
    molecules = corpus.read_corpus(config.corpus, label_missing=config.label_missing)
    if config.holdout >= len(molecules):
        raise ConfigError(f'holdout {config.holdout} leaves no training molecules', key='holdout')
    return corpus.split_holdout(molecules, config.holdout, config.seed)


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    config.require('corpus')
    out = _output_dir(args, config)
    train_set, held_out = _split_corpus(config)

    model = vae.AllSmilesVae(config.model_config(), smiles.Vocabulary.default(), config.seed)
    result = training.train(model, train_set, config.train_config(), config.seed, progress=args.progress)
    training.save_checkpoint(model, out / CHECKPOINT_FILE, {'step': result.step, 'epoch': result.epoch})
    training.write_metrics(result.metrics, out / METRICS_FILE)

    summary = {'train': training.evaluate(model, train_set, seed=config.seed), 'steps': result.step}
    if held_out:
        summary['holdout'] = training.evaluate(model, held_out, seed=config.seed)
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2), encoding='utf-8')
    print(json.dumps(summary, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    config = RunConfig.load(args.config)
    config.require('corpus', 'checkpoint')
    model = _load_model(config.checkpoint)
    train_set, held_out = _split_corpus(config)
    summary = {'train': training.evaluate(model, train_set, args.width, config.seed)}
    if held_out:
        summary['holdout'] = training.evaluate(model, held_out, args.width, config.seed)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.checkpoint)
    molecules = corpus.read_corpus(args.file)
    z = vae.map_encode(model, [m.graph for m in molecules], args.seed)
    frame = pd.DataFrame(z, columns=[f'z{i}' for i in range(z.shape[1])])
    frame.insert(0, 'smiles', [m.smiles for m in molecules])
    _emit_frame(frame, args, args.out)
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    frame = pd.read_csv(sys.stdin if args.file == '-' else args.file)
    columns = [c for c in frame.columns if c.startswith('z')] or list(frame.select_dtypes('number').columns)
    if len(columns) != model.config.latent_size:
        raise ConfigError(f'expected {model.config.latent_size} latent columns, found {len(columns)}',
                          key='columns')
    failures = 0
    for i, row in enumerate(frame[columns].to_numpy(dtype=np.float64)):
        try:
            print(vae.beam_decode(model, row, args.width, args.grammar_mask))
        except AllSmilesError as exc:
            _report_error(exc, row=i)
            failures += 1
    return 1 if failures else 0


def cmd_sample(args) -> int:
    model = _load_model(args.checkpoint)
    known = []
    if args.corpus:
        known = [smiles.write_canonical(m.graph) for m in corpus.read_corpus(args.corpus)]
    report = vae.sample_prior_and_decode(model, args.n, args.seed, args.grammar_mask, known, args.width)
    if args.strings:
        for s in report.strings:
            print(s)
    stats = report.as_dict()
    print(f"validity\t{stats['validity']:.3f}\nuniqueness\t{stats['uniqueness']:.3f}\n"
          f"novelty\t{stats['novelty']:.3f}")
    return 0


def cmd_optimize(args) -> int:
    config = RunConfig.load(args.config)
    config.require('checkpoint')
    opt = config.opt_config()
    if args.trajectories is not None:
        opt.trajectories = args.trajectories
    out = _output_dir(args, config)
    model = _load_model(config.checkpoint)

    report = latentopt.optimize_protocol(model, opt, config.seed)
    report.rows.to_csv(_inside(out, REPORT_FILE), index=False)
    top = report.top_true(opt.report_top, opt.maximize)
    print(f"trajectories\t{report.attempted}\nfailed\t{report.failed}\n"
          f"top\t{','.join(f'{v:.3f}' for v in top)}")
    if args.ablation:
        for name, value in latentopt.ablation_compare(model, opt, config.seed).items():
            print(f"{name}_top_mean\t{value:.3f}")
    return 0


def cmd_slice(args) -> int:
    model = _load_model(args.checkpoint)
    center = vae.map_encode(model, [args.smiles], args.seed)[0]
    u_dir = latentopt.regressor_direction(model, args.head)
    u_dir = u_dir / max(np.linalg.norm(u_dir), 1e-12)
    v_dir = generator(args.seed, 11).standard_normal(u_dir.size)
    v_dir -= v_dir.dot(u_dir) * u_dir
    v_dir /= max(np.linalg.norm(v_dir), 1e-12)
    frame = latentopt.latent_slice(model, center, u_dir, v_dir, (args.steps, args.steps), args.extent,
                                   args.head, width=args.width)
    _emit_frame(frame, args, args.out or SLICE_FILE)
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.run_suite(ops=not args.skip_ops, blocks=not args.skip_blocks, model=not args.skip_model)
    for report in result.reports:
        if args.verbose or not report.passed:
            print(report.summary())
    return 0 if result.passed else 1


def cmd_annulus(args) -> int:
    stats = latentopt.annulus_check(args.n, args.samples, args.seed)
    for key, value in stats.as_dict().items():
        print(f"{key}\t{value}")
    return 0


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='allsmiles', description='All SMILES VAE toolkit')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    parser.add_argument('--output-dir', default=None, help='directory for every written file')
    parser.add_argument('--no-progress', dest='progress', action='store_false', help='hide progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name: str, handler, help_text: str, file_arg: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        if file_arg:
            p.add_argument('file', help="corpus file, '-' for stdin")
        return p

    command('parse', cmd_parse, 'parse a corpus and report per-line errors', True)
    command('canon', cmd_canon, 'print canonical SMILES', True)
    p = command('enum', cmd_enum, 'random SMILES of every molecule', True)
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--seed', type=int, default=0)
    command('validate', cmd_validate, 'exit nonzero if any line fails to parse', True)

    p = command('gen-corpus', cmd_gen_corpus, 'sample a labelled corpus from the grammar automaton')
    p.add_argument('--n', type=int, default=500)
    p.add_argument('--max-len', type=int, default=60)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default=None, help='file name under --output-dir (stdout if omitted)')
    command('diameter-stats', cmd_diameter_stats, 'mean and max graph diameter', True)

    p = command('train', cmd_train, 'train a model from a JSON run config')
    p.add_argument('--config', required=True)
    p = command('evaluate', cmd_evaluate, 'reconstruction and property metrics of a checkpoint')
    p.add_argument('--config', required=True)
    p.add_argument('--width', type=int, default=None)

    p = command('encode', cmd_encode, 'MAP latent vectors as CSV', True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default=None)
    p = command('decode', cmd_decode, 'beam-decode latent vectors from a CSV', True)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--width', type=int, default=None)
    p.add_argument('--grammar-mask', action='store_true', default=None)
    p = command('sample', cmd_sample, 'decode prior samples and report validity')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--n', type=int, default=1000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--width', type=int, default=None)
    p.add_argument('--grammar-mask', action='store_true', default=None)
    p.add_argument('--corpus', default=None, help='training corpus for the novelty statistic')
    p.add_argument('--strings', action='store_true', help='also print the decoded strings')

    p = command('optimize', cmd_optimize, 'latent property optimization protocol')
    p.add_argument('--config', required=True)
    p.add_argument('--trajectories', type=int, default=None)
    p.add_argument('--ablation', action='store_true', help='also compare against the unconstrained run')
    p = command('slice', cmd_slice, 'decode a 2D latent sheet around a molecule')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--smiles', required=True)
    p.add_argument('--head', default='mw')
    p.add_argument('--steps', type=int, default=21)
    p.add_argument('--extent', type=float, default=1.0)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--width', type=int, default=None)
    p.add_argument('--out', default=None)

    p = command('gradcheck', cmd_gradcheck, 'finite-difference gradient suite')
    p.add_argument('--skip-ops', action='store_true')
    p.add_argument('--skip-blocks', action='store_true')
    p.add_argument('--skip-model', action='store_true')
    p = command('annulus', cmd_annulus, 'norm concentration of standard normal draws')
    p.add_argument('--n', type=int, default=128)
    p.add_argument('--samples', type=int, default=10_000)
    p.add_argument('--seed', type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging('DEBUG' if args.verbose else None)
    try:
        return args.handler(args)
    except AllSmilesError as exc:
        _report_error(exc, command=args.command)
        return 1
    except (OSError, ValueError) as exc:
        print(f'error={type(exc).__name__} command={args.command} message="{exc}"', file=sys.stderr)
        return 1
