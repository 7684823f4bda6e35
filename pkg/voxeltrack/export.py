"""Result files and plot-ready series.

Results (`results.jsonl`) hold one JSON object per line. Every record has
a `kind`:

    sequence   One track under one mode. Fields: sequence, object, mode,
               success, precision, fps, frame_drop, frames,
               device_label, data_rate, latency, associations (frame
               index of the prediction scored for each label, 0 being
               the initial box).
    summary    All tracks of a mode. Fields: mode, success, precision,
               fps, frame_drop, sequences, device_label, data_rate,
               latency.
    failure    A track that could not be evaluated. Fields: sequence,
               object, message.

Success and Precision are percentages, frame_drop is a percentage of the
frames after the first, latency is the injected latency in seconds or
null when measured, and an infinite fps is written as null.

Series files are tab separated with a header row.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .evaluate import EvalReport, ModeSummary, SequenceResult
from .exceptions import DataError
from .enums import EvalMode
from .tracker import TrackRecord
from .train import LossRecord


def _finite(value: float) -> float | None:
    return value if math.isfinite(value) else None


class ResultWriter:
    """Convert an evaluation report into result records."""

    def __init__(self, report: EvalReport, device_label: str, data_rate: float, latency: float | None) -> None:
        self.report = report
        self.info = {'device_label': device_label, 'data_rate': data_rate, 'latency': latency}

    def _sequence(self, result: SequenceResult) -> dict[str, Any]:
        return {
            'kind': 'sequence',
            'sequence': result.sequence_id,
            'object': result.object_id,
            'mode': result.mode.value,
            'success': result.ope.success,
            'precision': result.ope.precision,
            'fps': _finite(result.fps),
            'frame_drop': result.frame_drop,
            'frames': len(result.ope),
            **self.info,
            'associations': list(result.associations),
        }

    def _summary(self, summary: ModeSummary) -> dict[str, Any]:
        return {
            'kind': 'summary',
            'mode': summary.mode.value,
            'success': summary.ope.success,
            'precision': summary.ope.precision,
            'fps': _finite(summary.fps),
            'frame_drop': summary.frame_drop,
            'sequences': summary.sequences,
            **self.info,
        }

    def records(self) -> Iterator[dict[str, Any]]:
        for result in self.report.results:
            yield self._sequence(result)
        for mode in EvalMode:
            summary = self.report.summary(mode)
            if summary is not None:
                yield self._summary(summary)
        for failure in self.report.failures:
            yield {'kind': 'failure', 'sequence': failure.sequence_id, 'object': failure.object_id,
                   'message': failure.message}

    def save(self, path: str | os.PathLike) -> None:
        write_jsonl(path, self.records())


def write_jsonl(path: str | os.PathLike, records: Iterable[dict[str, Any]]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record, allow_nan=False))
            f.write('\n')


def read_jsonl(path: str | os.PathLike) -> list[dict[str, Any]]:
    """Read a JSON lines file.

    Raises:
        DataError: If the file is unreadable or a line is not valid JSON.
    """
    records = []
    try:
        with open(path, encoding='utf-8') as f:
            for line_number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f'{path}:{line_number}: invalid record ({e})') from e
    except OSError as e:
        raise DataError(f'unable to read {path}: {e}') from e
    return records


def track_record(record: TrackRecord) -> dict[str, Any]:
    box = record.box
    return {
        'frame_id': record.frame_id,
        'box': {'x': box.x, 'y': box.y, 'z': box.z, 'w': box.w, 'h': box.h, 'd': box.d, 'alpha': box.alpha},
        'score': record.score,
        'rotation_index': record.rotation_index,
        'elapsed_ns': record.elapsed_ns,
        'clamped': record.clamped,
    }


def write_track_records(path: str | os.PathLike, records: Iterable[TrackRecord]) -> None:
    write_jsonl(path, map(track_record, records))


def write_table(path: str | os.PathLike, rows: Iterable[Sequence[Any]]) -> None:
    """Write tab separated rows, the first being the header."""
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write('\t'.join('' if value is None else str(value) for value in row))
            f.write('\n')


def _loss_series(records: Iterable[LossRecord]) -> Iterator[tuple[Any, ...]]:
    yield 'step', 'loss'
    for step, loss in sorted(records):
        yield step, repr(loss)


def loss_series(path: str | os.PathLike, records: Iterable[LossRecord]) -> None:
    """Save the loss curve sorted by step."""
    write_table(path, _loss_series(records))


def _realtime_rows(records: Iterable[dict[str, Any]]) -> dict[tuple[str, float], list[dict[str, Any]]]:
    groups: dict[tuple[str, float], list[dict[str, Any]]] = defaultdict(list)
    for record in records:
        if record.get('kind') == 'summary' and EvalMode(record['mode']).is_realtime:
            groups[record['device_label'], float(record['data_rate'])].append(record)
    return groups


def realtime_series(output_dir: str | os.PathLike, records: Iterable[dict[str, Any]]) -> list[Path]:
    """Save the real-time summaries grouped by device label and data rate.

    One file is written per group, with a row per (mode, latency).

    Returns:
        The written paths.
    """
    output_dir = Path(output_dir)
    paths = []
    for (device_label, data_rate), group in sorted(_realtime_rows(records).items()):
        group.sort(key=lambda record: (record['mode'], record['latency'] is not None, record['latency'] or 0.0))
        rows: list[tuple[Any, ...]] = [('mode', 'latency', 'success', 'precision', 'fps', 'frame_drop')]
        rows += [(record['mode'], record['latency'], record['success'], record['precision'],
                  record['fps'], record['frame_drop']) for record in group]
        path = output_dir / f'realtime_{device_label}_{data_rate:g}hz.tsv'
        write_table(path, rows)
        paths.append(path)
    return paths


def sweep_rows(name: str, rows: Iterable[tuple[Any, float, float]]) -> Iterator[tuple[Any, ...]]:
    yield name, 'success', 'precision'
    yield from rows


def save_map(path: str | os.PathLike, values: np.ndarray) -> None:
    """Save a score or penalty map as a 2D tab separated grid."""
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter='\t', fmt='%.9g')
