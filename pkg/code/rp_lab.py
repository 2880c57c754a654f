#!/usr/bin/env python3
"""
Robust Processing lab

Trains MNIST classifiers behind the Robust Processing + thermometer-encoding
defense, attacks them with LS-PGA / FGSM and writes plot-ready reports.

Usage:
    python rp_lab.py train --data-dir D --pipeline all-three --profile fast --out model.rpnet
    python rp_lab.py eval --ckpt model.rpnet --data-dir D --attack --epsilon 0.3 --report eval.csv
    python rp_lab.py sweep --ckpt model.rpnet --data-dir D --param epsilon --values 0.1,0.3,0.5 --report sweep.csv
    python rp_lab.py attack --ckpt raw.rpnet --data-dir D --method ifgsm --epsilon 0.3 --alpha-step 0.05 --iters 10
    python rp_lab.py histogram --data-dir D --pipeline all-three --report hist.csv
    python rp_lab.py fetch-info

Every subcommand accepts --config FILE with `key = value` lines mirroring its flags;
flags given on the command line win over the file, the file wins over config/config.yaml.

Exit codes: 0 success, 1 interrupted, 2 usage or config error, 3 data error, 4 numeric failure.
"""

import argparse
import os
import sys
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional

from model import ModelSpec
from pipeline import PRESETS, Pipeline
from attack import AttackConfig
from dataio import MNIST_SOURCES, Dataset, load_mnist, subset
from trainer import TrainConfig, save_checkpoint, train
from harness import (DEFAULT_BATCH_SIZES, DEFAULT_EPSILONS, ModelBundle, SweepRow, batch_size_sweep,
                     emit_histogram, emit_report, epsilon_sweep, evaluate, pixel_histogram)
from rp_utils import (ConfigError, DataError, NumericFailure, ShapeMismatchError, config_section, load_config,
                      load_run_config, parse_bool, setup_logger)

EXIT_OK = 0
EXIT_INTERRUPTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ATTACK_FLAGS = ('epsilon', 'delta', 'xi', 'steps', 'restarts', 'seed')


def pipeline_name(text: str) -> str:
    key = text.strip().lower()
    if key not in PRESETS:
        raise argparse.ArgumentTypeError(f"unknown pipeline '{text}' (choose from {', '.join(PRESETS)})")
    return key


def float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


class RPLab:
    """Runs one CLI subcommand with settings merged from config.yaml, a run file and flags"""

    def __init__(self, args: argparse.Namespace, config: Dict[str, Any]):
        """
        Parameters:
        - args: Parsed (and run-file merged) command-line arguments
        - config: Contents of config/config.yaml
        """
        self.args = args
        self.config = config
        self.logger = setup_logger(__name__, f"lab_{args.command}")
        self.logger.info(f"Running '{args.command}' with {self._given()}")

    def _given(self) -> Dict[str, Any]:
        return {key: value for key, value in vars(self.args).items() if value is not None}

    def setting(self, name: str, section: str, key: Optional[str] = None, default: Any = None) -> Any:
        """CLI/run-file value when present, config.yaml value otherwise"""
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        return config_section(self.config, section).get(key or name, default)

    def attack_config(self) -> AttackConfig:
        overrides = {name: getattr(self.args, name, None) for name in ATTACK_FLAGS}
        return AttackConfig.from_config(config_section(self.config, 'attack'), **overrides)

    def data_dir(self) -> str:
        data_dir = self.setting('data_dir', 'data')
        if not data_dir:
            raise ConfigError("No MNIST directory: pass --data-dir or set data.data_dir in config.yaml")
        return data_dir

    def _limit(self, dataset: Dataset) -> Dataset:
        count = getattr(self.args, 'subset', None)
        if count is None or count >= len(dataset):
            return dataset
        return subset(dataset, count, seed=config_section(self.config, 'data').get('subset_seed', 0))

    def load_split(self, split: str) -> Dataset:
        data = config_section(self.config, 'data')
        splits = load_mnist(self.data_dir(), validation_size=data.get('validation_size', 5000))
        return self._limit(getattr(splits, split))

    def bundle(self) -> ModelBundle:
        if not self.args.ckpt:
            raise ConfigError("--ckpt is required")
        return ModelBundle.from_checkpoint(self.args.ckpt)

    def eval_batch_size(self) -> int:
        return int(self.setting('batch_size', 'evaluation', default=100))

    def workers(self) -> int:
        return int(self.setting('workers', 'evaluation', default=1))

    def write_rows(self, rows: List[SweepRow]) -> None:
        for row in rows:
            r = row.report
            alpha = 'n/a' if r.alpha is None else f"{r.alpha:.2f}"
            print(f"{row.param}={row.value}: clean {r.clean_accuracy:.2f}%  attacked {r.attacked_accuracy:.2f}%  "
                  f"alpha {alpha}")
        if self.args.report:
            emit_report(rows, None, self.args.report)
            print(f"Report written to {self.args.report}")

    def train(self) -> None:
        args = self.args
        encode = not args.no_encode
        if encode:
            name = self.setting('pipeline', 'model', default='all-three')
        else:
            name = args.pipeline or 'none'
        levels = int(config_section(self.config, 'model').get('levels', 15))
        pipeline = Pipeline.from_name(name, levels=levels, encode=encode)
        profile = self.setting('profile', 'model', default='paper')
        spec = ModelSpec.for_profile(profile, input_channels=pipeline.input_channels)

        attack = self.attack_config()
        if attack.levels != levels:
            attack = replace(attack, levels=levels)
        config = TrainConfig.from_config(
            config_section(self.config, 'training'), profile=profile, attack=attack,
            epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, optimizer=args.optimizer,
            adversarial=args.adv, adv_fraction=args.adv_fraction, seed=args.seed)

        data = config_section(self.config, 'data')
        splits = load_mnist(self.data_dir(), validation_size=data.get('validation_size', 5000))
        train_set = self._limit(splits.train)
        test_set = self._limit(splits.test)
        params, history = train(train_set, pipeline, spec, config, test_dataset=test_set)
        for metrics in history:
            accuracy = 'n/a' if metrics.test_accuracy is None else f"{metrics.test_accuracy:.2f}%"
            print(f"epoch {metrics.epoch}: loss {metrics.train_loss:.4f}  test accuracy {accuracy}")

        out = args.out or os.path.join('workdir', 'checkpoints',
                                       f"{pipeline.name}{'_adv' if config.adversarial else ''}.rpnet")
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        save_checkpoint(out, spec, pipeline, params, trained_with_adversary=config.adversarial)
        print(f"Checkpoint written to {out}")

    def eval(self) -> None:
        bundle = self.bundle()
        attack = self.attack_config()
        report = evaluate(bundle, self.load_split('test'), attack, attack=bool(self.args.attack),
                          batch_size=self.eval_batch_size(), workers=self.workers())
        self.write_rows([SweepRow(param='epsilon', value=attack.epsilon, report=report)])

    def sweep(self) -> None:
        bundle = self.bundle()
        attack = self.attack_config()
        dataset = self.load_split('test')
        sweeps = config_section(self.config, 'sweeps')
        if self.args.param == 'epsilon':
            values = self.args.values or sweeps.get('epsilons', list(DEFAULT_EPSILONS))
            rows = epsilon_sweep(bundle, dataset, values, attack, batch_size=self.eval_batch_size(),
                                 workers=self.workers())
        else:
            values = self.args.values or sweeps.get('batch_sizes', list(DEFAULT_BATCH_SIZES))
            if any(v != int(v) for v in values):
                raise ConfigError(f"Batch sizes must be whole numbers, got {values}")
            rows = batch_size_sweep(bundle, dataset, [int(v) for v in values], attack, workers=self.workers())
        self.write_rows(rows)

    def attack(self) -> None:
        args = self.args
        bundle = self.bundle()
        attack = self.attack_config()
        method = args.method or ('lspga' if bundle.pipeline.encode else 'fgsm')
        iters = args.iters or 1
        report = evaluate(bundle, self.load_split('test'), attack, method=method,
                          batch_size=self.eval_batch_size(), workers=self.workers(),
                          alpha_step=args.alpha_step, iters=iters)
        self.write_rows([SweepRow(param='method', value=method, report=report)])

    def histogram(self) -> None:
        name = self.setting('pipeline', 'model', default='all-three')
        pipeline = Pipeline.from_name(name)
        before, after = pixel_histogram(self.load_split('test'), pipeline, batch_size=self.eval_batch_size())
        print(f"before: mean {before.mean:.2f}  std {before.std:.2f}  count std {before.count_std:.2f}")
        print(f"after:  mean {after.mean:.2f}  std {after.std:.2f}  count std {after.count_std:.2f}")
        if self.args.report:
            emit_histogram(before, after, self.args.report)
            print(f"Histogram written to {self.args.report}")

    def fetch_info(self) -> None:
        print("MNIST is not downloaded automatically. Fetch these files into your --data-dir:")
        for key, (url, packed, unpacked) in MNIST_SOURCES.items():
            print(f"  {key:13s} {url}  ({packed} bytes gzipped, {unpacked} bytes unpacked)")

    def run(self) -> None:
        handler = getattr(self, self.args.command.replace('-', '_'))
        handler()


def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--epsilon', type=float, help='Attack strength (L-infinity radius)')
    parser.add_argument('--delta', type=float, help='LS-PGA temperature annealing factor')
    parser.add_argument('--xi', type=float, help='LS-PGA step size')
    parser.add_argument('--steps', type=int, help='LS-PGA iterations')
    parser.add_argument('--restarts', type=int, help='LS-PGA random restarts')
    parser.add_argument('--seed', type=int, help='Random seed')


def _add_common_flags(parser: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    parser.add_argument('--config', help='Run file with key = value lines')
    parser.add_argument('--data-dir', help='Directory holding the MNIST IDX files')
    parser.add_argument('--subset', type=int, help='Use a deterministic subset of this many images')
    parser.add_argument('--batch-size', type=int, help='Batch size')
    parser.add_argument('--workers', type=int, help='Worker processes for attack batches')
    if checkpoint:
        parser.add_argument('--ckpt', help='Checkpoint file')
        parser.add_argument('--report', help='Report file (.csv or .json)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Robust Processing defense lab for MNIST",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    commands = parser.add_subparsers(dest='command', required=True)

    train_parser = commands.add_parser('train', help='Train a model and write a checkpoint')
    _add_common_flags(train_parser, checkpoint=False)
    train_parser.add_argument('--pipeline', type=pipeline_name, help=f"One of {', '.join(PRESETS)}")
    train_parser.add_argument('--profile', type=str.lower, choices=('paper', 'fast'), help='Model size')
    train_parser.add_argument('--epochs', type=int, help='Training epochs')
    train_parser.add_argument('--lr', type=float, help='Learning rate')
    train_parser.add_argument('--optimizer', type=str.lower, choices=('adam', 'sgd'), help='Optimizer')
    train_parser.add_argument('--adv', action='store_true', default=None, help='Mix LS-PGA adversaries into batches')
    train_parser.add_argument('--adv-fraction', type=float, help='Share of each batch replaced by adversaries')
    train_parser.add_argument('--no-encode', action='store_true', default=None,
                              help='Train the continuous raw-pixel baseline')
    train_parser.add_argument('--out', help='Checkpoint output path')
    _add_attack_flags(train_parser)

    eval_parser = commands.add_parser('eval', help='Clean and attacked accuracy of a checkpoint')
    _add_common_flags(eval_parser)
    eval_parser.add_argument('--attack', action='store_true', default=None, help='Run the attack')
    _add_attack_flags(eval_parser)

    sweep_parser = commands.add_parser('sweep', help='Sweep attack strength or evaluation batch size')
    _add_common_flags(sweep_parser)
    sweep_parser.add_argument('--param', type=str.lower, choices=('epsilon', 'batch-size'), default=None,
                              help='Swept parameter')
    sweep_parser.add_argument('--values', type=float_list, help='Comma-separated values')
    _add_attack_flags(sweep_parser)

    attack_parser = commands.add_parser('attack', help='Attacked accuracy with a chosen method')
    _add_common_flags(attack_parser)
    attack_parser.add_argument('--method', type=str.lower, choices=('fgsm', 'ifgsm', 'lspga'), help='Attack')
    attack_parser.add_argument('--alpha-step', type=float, help='Iterative FGSM step size')
    attack_parser.add_argument('--iters', type=int, help='Iterative FGSM iterations')
    _add_attack_flags(attack_parser)

    histogram_parser = commands.add_parser('histogram', help='Pixel distribution before/after the pipeline')
    _add_common_flags(histogram_parser, checkpoint=False)
    histogram_parser.add_argument('--pipeline', type=pipeline_name, help=f"One of {', '.join(PRESETS)}")
    histogram_parser.add_argument('--report', help='Histogram file (.csv or .json)')

    commands.add_parser('fetch-info', help='Print the official MNIST download locations')
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise ConfigError(f"Unknown command '{command}'")


def _convert(action: argparse.Action, raw: str) -> Any:
    if action.nargs == 0:
        return parse_bool(raw)
    converter: Callable[[str], Any] = action.type or str
    try:
        value = converter(raw)
    except (argparse.ArgumentTypeError, ValueError) as e:
        raise ConfigError(f"Run config value for '{action.dest}': {e}")
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"Run config value for '{action.dest}' must be one of {list(action.choices)}")
    return value


def merge_run_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill flags missing from the command line with values from the --config run file"""
    path = getattr(args, 'config', None)
    if not path:
        return args
    actions = {action.dest: action for action in _subparser(parser, args.command)._actions
               if action.dest not in ('help', 'config')}
    for key, raw in load_run_config(path, actions).items():
        if getattr(args, key, None) is None:
            setattr(args, key, _convert(actions[key], raw))
    return args


def main(argv: Optional[List[str]] = None) -> int:
    """Main function to parse arguments and run a subcommand; returns the exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = merge_run_config(parser, args)
        if args.command == 'sweep' and args.param is None:
            args.param = 'epsilon'
        RPLab(args, load_config()).run()
        return EXIT_OK
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        return EXIT_INTERRUPTED
    except (ConfigError, ShapeMismatchError) as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"Numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
