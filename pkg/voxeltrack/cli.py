"""Command line interface.

Exit codes:
    0  success
    1  usage or configuration error
    2  missing or invalid data
    3  any other failure
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterator, NoReturn, Sequence

import filelock
import numpy as np
import psutil
import scipy
import simpy
import yaml

from .checkpoint import Checkpoint
from .config import RunConfig
from .constants import CHECKPOINT_EXTENSION, LOSS_CURVE_NAME, RESULTS_NAME, RUN_METADATA_NAME
from .dataset import DatasetManifest, SequenceData, generate_dataset
from .enums import EvalMode
from .evaluate import (EvalReport, LatencyModel, ModelTrackerFactory, TrackerFactory, echo_factory,
                       run_evaluation)
from .exceptions import CheckpointError, ConfigError, DataError
from .export import (ResultWriter, loss_series, read_jsonl, realtime_series, save_map, sweep_rows,
                     write_table, write_track_records)
from .nn.model import SiameseModel
from .tracker import Tracker, TrackerConfig
from .train import TrainingSet, read_loss_curve, train_loop
from .utils import log
from .version import VERSION


logger = logging.getLogger(__name__)

CHECKPOINT_NAME = f'checkpoint.{CHECKPOINT_EXTENSION}'

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAILURE = 3


class ArgumentParser(argparse.ArgumentParser):
    """Parser that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f'{self.prog}: error: {message}\n')


def _add_common(parser: argparse.ArgumentParser, output: str | None) -> None:
    config_group = parser.add_argument_group('Config Options')
    config_group.add_argument('-c', '--config', type=Path, help='YAML config file to load')
    config_group.add_argument('--desk', action='store_true', help='start from the desk scale preset')
    config_group.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                              help='override a config value, such as tracker.context_amount=0.26')
    config_group.add_argument('--seed', type=int, help='seed for every random source')

    output_group = parser.add_argument_group('Output Options')
    output_group.add_argument('-o', '--output', type=Path, default=None if output is None else Path(output),
                              help='output directory')
    output_group.add_argument('-v', '--verbose', action='count', default=0, help='show debug messages')
    output_group.add_argument('-q', '--quiet', action='count', default=0, help='only show warnings and errors')


def _add_model_source(parser: argparse.ArgumentParser, split: str) -> None:
    group = parser.add_argument_group('Input Options')
    group.add_argument('--checkpoint', type=Path, help='model checkpoint to load')
    group.add_argument('--data', type=Path, help=f'dataset manifest (default: <dataset.root>/{split}.yaml)')


def _add_eval_options(parser: argparse.ArgumentParser, single_mode: bool = False) -> None:
    group = parser.add_argument_group('Evaluation Options')
    modes = [mode.value for mode in EvalMode]
    if single_mode:
        group.add_argument('--mode', choices=modes, default=EvalMode.Offline.value, help='evaluation protocol')
    else:
        group.add_argument('--mode', dest='modes', choices=modes, action='append',
                           help='evaluation protocol, may be repeated (default: all)')
    group.add_argument('--data-rate', type=float, help='sensor rate in Hz (default: from the dataset)')
    latency = group.add_mutually_exclusive_group()
    latency.add_argument('--latency', type=float, help='inject a fixed latency in seconds per frame')
    latency.add_argument('--latency-periods', type=float, help='inject a latency in frame periods')
    group.add_argument('--tracker', choices=['model', 'echo'], help='track with the model or echo the labels')
    group.add_argument('--device-label', help='name to group real-time results by')
    group.add_argument('--workers', type=int, help='parallel evaluation processes (default: physical cores)')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='voxeltrack', description='Voxel pseudo image 3D single object tracking',
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('--version', action='version', version=f'voxeltrack {VERSION}')
    commands = parser.add_subparsers(dest='command', required=True, metavar='COMMAND')

    gen = commands.add_parser('gen', help='generate a synthetic dataset')
    _add_common(gen, None)
    gen.set_defaults(func=cmd_gen)

    train = commands.add_parser('train', help='train a model')
    _add_common(train, 'runs/train')
    _add_model_source(train, 'train')
    train.add_argument('--steps', type=int, help='number of training steps')
    train.add_argument('--resume', action='store_true', help='continue from the checkpoint in the output directory')
    train.set_defaults(func=cmd_train)

    track = commands.add_parser('track', help='track one object and save the per-frame records')
    _add_common(track, 'runs/track')
    _add_model_source(track, 'test')
    track.add_argument('--sequence', type=int, help='sequence id (default: first)')
    track.add_argument('--object', type=int, help='object id (default: first in the sequence)')
    track.set_defaults(func=cmd_track)

    evaluate = commands.add_parser('eval', help='evaluate offline or in real time')
    _add_common(evaluate, 'runs/eval')
    _add_model_source(evaluate, 'test')
    _add_eval_options(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    sweep = commands.add_parser('sweep', help='evaluate a range of values of one tracker setting')
    _add_common(sweep, 'runs/sweep')
    _add_model_source(sweep, 'val')
    _add_eval_options(sweep, single_mode=True)
    sweep.add_argument('--param', required=True, help='tracker setting, such as tracker.context_amount')
    sweep.add_argument('--values', required=True, nargs='+', help='values to try')
    sweep.set_defaults(func=cmd_sweep)

    plot = commands.add_parser('plot-data', help='write plot ready series')
    _add_common(plot, 'runs/plot')
    _add_model_source(plot, 'test')
    plot.add_argument('--runs', type=Path, nargs='*', default=[],
                      help='training or evaluation output directories to collect series from')
    plot.add_argument('--sequence', type=int, help='sequence id for the map dump')
    plot.add_argument('--object', type=int, help='object id for the map dump')
    plot.add_argument('--frame', type=int, help='frame id to dump the score and penalty maps of')
    plot.set_defaults(func=cmd_plot_data)
    return parser


def load_config(args: argparse.Namespace, extra: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Build the run config from the preset, file, overrides and seed."""
    config = RunConfig.desk() if args.desk else RunConfig()
    if args.config is not None:
        config = RunConfig.load(args.config, config)
    if extra:
        config = RunConfig.from_dict(extra, config)
    config = config.with_overrides(args.overrides)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _eval_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    values: dict[str, Any] = {}
    if getattr(args, 'modes', None):
        values['modes'] = list(args.modes)
    if getattr(args, 'mode', None):
        values['modes'] = [args.mode]
    for name in ('data_rate', 'latency', 'latency_periods', 'tracker', 'device_label', 'workers'):
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    return {'eval': values} if values else {}


def run_metadata(config: RunConfig, argv: Sequence[str]) -> dict[str, Any]:
    """Describe a run without anything time dependent."""
    return {
        'command': list(argv),
        'seed': config.seed,
        'config': config.to_dict(),
        'versions': {
            'voxeltrack': VERSION,
            'python': platform.python_version(),
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'simpy': simpy.__version__,
        },
        'cpu_count': {'physical': psutil.cpu_count(logical=False), 'logical': psutil.cpu_count()},
    }


@contextmanager
def output_dir(path: Path, config: RunConfig, argv: Sequence[str]) -> Iterator[Path]:
    """Lock an output directory and write the run metadata into it."""
    path.mkdir(parents=True, exist_ok=True)
    with filelock.FileLock(path / '.lock', timeout=0):
        with open(path / RUN_METADATA_NAME, 'w', encoding='utf-8') as f:
            yaml.safe_dump(run_metadata(config, argv), f, default_flow_style=False, sort_keys=False)
        yield path


def _manifest(args: argparse.Namespace, config: RunConfig, split: str) -> DatasetManifest:
    path = args.data if args.data is not None else Path(config.dataset.root) / f'{split}.yaml'
    if not path.is_file():
        raise DataError(f'dataset manifest not found: {path}')
    return DatasetManifest.load(path)


def _checkpoint(path: Path | None) -> Checkpoint:
    if path is None:
        raise ConfigError('a checkpoint is needed, pass --checkpoint')
    if not path.is_file():
        raise DataError(f'checkpoint not found: {path}')
    return Checkpoint.load(path)


def _worker_count(config: RunConfig) -> int:
    if config.eval.workers:
        return config.eval.workers
    return psutil.cpu_count(logical=False) or 1


def _factory(args: argparse.Namespace, config: RunConfig, tracker_config: TrackerConfig) -> TrackerFactory:
    if config.eval.tracker == 'echo':
        return echo_factory
    return ModelTrackerFactory(_checkpoint(args.checkpoint).model, tracker_config)


def _latency(config: RunConfig, manifest: DatasetManifest) -> LatencyModel:
    data_rate = config.eval.data_rate or manifest.data_rate
    injected = config.eval.injected_latency(data_rate)
    if injected is None:
        return LatencyModel.measured(data_rate)
    return LatencyModel.injected(injected, data_rate)


def _select(sequences: Sequence[SequenceData], sequence_id: int | None,
            object_id: int | None) -> tuple[SequenceData, int]:
    """Pick a sequence and object, defaulting to the first ones."""
    if not sequences:
        raise DataError('the dataset has no sequences')
    if sequence_id is None:
        sequence = sequences[0]
    else:
        matches = [sequence for sequence in sequences if sequence.sequence_id == sequence_id]
        if not matches:
            raise DataError(f'sequence {sequence_id} is not in the dataset')
        sequence = matches[0]
    if not sequence.tracks:
        raise DataError(f'sequence {sequence.sequence_id} has no labelled objects')
    if object_id is None:
        return sequence, sequence.tracks[0].object_id
    if all(track.object_id != object_id for track in sequence.tracks):
        raise DataError(f'object {object_id} is not in sequence {sequence.sequence_id}')
    return sequence, object_id


def cmd_gen(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_config(args)
    root = args.output if args.output is not None else Path(config.dataset.root)
    with output_dir(root, config, argv):
        manifests = generate_dataset(config.dataset, config.scene, config.grid, root)
    for split, manifest in manifests.items():
        print(f'{split}: {len(manifest.sequences)} sequences')
    return EXIT_SUCCESS


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_config(args, {'train': {'steps': args.steps}} if args.steps is not None else None)
    manifest = _manifest(args, config, 'train')

    resume = None
    if args.resume:
        resume = _checkpoint(args.output / CHECKPOINT_NAME)
        model = resume.model
    elif args.checkpoint is not None:
        model = _checkpoint(args.checkpoint).model
    else:
        model = SiameseModel.initialize(config.pillars, config.model)

    with output_dir(args.output, config, argv) as path:
        training_set = TrainingSet.from_manifest(manifest, model.pillar_config.grid, config.train, config.tracker)
        records = train_loop(training_set, model, config.train, path, resume=resume, progress=not args.quiet)
    if records:
        print(f'step {records[-1].step + 1}: loss {records[-1].loss:.6f}')
    return EXIT_SUCCESS


def cmd_track(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_config(args)
    model = _checkpoint(args.checkpoint).model
    sequence, object_id = _select(list(_manifest(args, config, 'test')), args.sequence, args.object)
    track = next(track for track in sequence.tracks if track.object_id == object_id)

    tracker = Tracker(model, config.tracker)
    frames = iter(track.frames)
    frame_id, box = next(frames)
    records = [tracker.init(sequence.clouds[frame_id], box)]
    records += [tracker.step(sequence.clouds[frame_id]) for frame_id, _ in frames]

    with output_dir(args.output, config, argv) as path:
        write_track_records(path / f'track_{sequence.sequence_id:04d}_{object_id}.jsonl', records)
    print(f'tracked object {object_id} of sequence {sequence.sequence_id} over {len(records)} frames')
    return EXIT_SUCCESS


def _evaluate(args: argparse.Namespace, config: RunConfig, tracker_config: TrackerConfig,
              manifest: DatasetManifest, sequences: Sequence[SequenceData]) -> EvalReport:
    latency = _latency(config, manifest)
    return run_evaluation(sequences, _factory(args, config, tracker_config), latency, config.eval.eval_modes,
                          _worker_count(config), progress=not args.quiet)


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_config(args, _eval_overrides(args))
    manifest = _manifest(args, config, 'test')
    report = _evaluate(args, config, config.tracker, manifest, list(manifest))

    latency = _latency(config, manifest)
    with output_dir(args.output, config, argv) as path:
        ResultWriter(report, config.eval.device_label, latency.data_rate, latency.latency).save(path / RESULTS_NAME)

    print(f'{"mode":<18}{"success":>10}{"precision":>11}{"fps":>10}{"drop %":>9}')
    for mode in config.eval.eval_modes:
        summary = report.summary(mode)
        if summary is not None:
            print(f'{mode.value:<18}{summary.ope.success:>10.2f}{summary.ope.precision:>11.2f}'
                  f'{summary.fps:>10.2f}{summary.frame_drop:>9.2f}')
    if report.failures and not report.results:
        logger.error('Every sequence failed to evaluate')
        return EXIT_FAILURE
    return EXIT_SUCCESS


def sweep_parameters() -> list[str]:
    """Get the names that can be swept."""
    return [f'tracker.{name}' for name in TrackerConfig.__dataclass_fields__ if name != 'keep_maps']


def cmd_sweep(args: argparse.Namespace, argv: Sequence[str]) -> int:
    valid = sweep_parameters()
    if args.param not in valid:
        raise ConfigError(f'unknown hyperparameter {args.param!r}, valid names are: {", ".join(valid)}')
    config = load_config(args, _eval_overrides(args))
    manifest = _manifest(args, config, 'val')
    sequences = list(manifest)
    mode = EvalMode(args.mode)

    rows = []
    for raw in args.values:
        tracker_config = config.with_overrides([f'{args.param}={raw}']).tracker
        value = getattr(tracker_config, args.param.split('.', 1)[1])
        summary = _evaluate(args, config, tracker_config, manifest, sequences).summary(mode)
        if summary is None:
            raise DataError(f'no sequence could be evaluated with {args.param}={raw}')
        rows.append((value, summary.ope.success, summary.ope.precision))
        print(f'{args.param}={value}: success {summary.ope.success:.2f}, precision {summary.ope.precision:.2f}')

    with output_dir(args.output, config, argv) as path:
        write_table(path / 'sweep.tsv', sweep_rows(args.param, rows))
    return EXIT_SUCCESS


def cmd_plot_data(args: argparse.Namespace, argv: Sequence[str]) -> int:
    config = load_config(args)
    with output_dir(args.output, config, argv) as path:
        results = []
        for run in args.runs:
            if (run / LOSS_CURVE_NAME).is_file():
                target = path / f'loss_{run.name}.tsv'
                loss_series(target, read_loss_curve(run / LOSS_CURVE_NAME))
                logger.info('Saved loss curve of %s to %s', run, target)
            if (run / RESULTS_NAME).is_file():
                results += read_jsonl(run / RESULTS_NAME)
        for target in realtime_series(path, results):
            logger.info('Saved real-time series to %s', target)

        if args.frame is not None:
            model = _checkpoint(args.checkpoint).model
            sequence, object_id = _select(list(_manifest(args, config, 'test')), args.sequence, args.object)
            track = next(track for track in sequence.tracks if track.object_id == object_id)
            frame_ids = track.frame_ids
            if args.frame not in frame_ids[1:]:
                raise DataError(f'frame {args.frame} is not a tracked frame of object {object_id}')

            tracker = Tracker(model, replace(config.tracker, keep_maps=True))
            tracker.init(sequence.clouds[frame_ids[0]], track.frames[0][1])
            for frame_id in frame_ids[1:frame_ids.index(args.frame) + 1]:
                record = tracker.step(sequence.clouds[frame_id])
            assert record.score_map is not None and record.penalty_map is not None
            save_map(path / f'score_map_{args.frame:06d}.tsv', record.score_map)
            save_map(path / f'penalty_map_{args.frame:06d}.tsv', record.penalty_map)
            logger.info('Saved %dx%d maps of frame %d', *record.score_map.shape, args.frame)
    return EXIT_SUCCESS


def main(argv: Sequence[str] | None = None) -> int:
    """Run a subcommand and get its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    log.configure(args.verbose - args.quiet)
    func: Callable[[argparse.Namespace, Sequence[str]], int] = args.func
    try:
        return func(args, argv)
    except ConfigError as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except (CheckpointError, DataError, FileNotFoundError) as e:
        logger.error('%s', e)
        return EXIT_DATA
    except filelock.Timeout as e:
        logger.error('Another process is already writing to "%s"', Path(e.lock_file).parent)
        return EXIT_FAILURE
    except Exception:
        logger.exception('Command failed')
        return EXIT_FAILURE
