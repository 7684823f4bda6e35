"""One pass evaluation and the streaming real-time benchmark.

Offline evaluation runs the tracker on every frame of a track and scores
each prediction against the label of the same frame.

The real-time benchmark replays a track as a sensor stream. Frame `i`
arrives at `i / data_rate` seconds, and a single worker processes one
frame at a time. Once a frame is done, the worker takes the most recent
frame that has arrived, and every older unprocessed frame is dropped.
Labels are then matched to the predictions that were available in time:

    predictive      latest prediction completed by the label's arrival
    non-predictive  latest prediction completed by the next arrival

Before any prediction is complete, the initial box is used.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Protocol, Sequence

import numpy as np
import numpy.typing as npt
import simpy
from tqdm import tqdm

from .constants import TIME_TOLERANCE
from .enums import EvalMode, LatencyKind
from .exceptions import ConfigError, InvalidGeometryError
from .dataset import SequenceData
from .nn.model import SiameseModel
from .tracker import Tracker, TrackerConfig, TrackRecord
from .types import Box3D, PointCloud, Track
from .utils.math import calculate_distance, polygon_area, polygon_clip


logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 101)

PRECISION_THRESHOLDS = np.linspace(0.0, 2.0, 101)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Get the 3D intersection over union of two oriented boxes.

    The footprints are intersected as rotated rectangles, then multiplied
    by the vertical overlap.

    >>> iou3d(Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(1, 0, 0, 2, 2, 2, 0))
    0.3333333333333333

    Raises:
        InvalidGeometryError: If the union has no volume.
    """
    if a == b:
        return 1.0

    overlap_z = max(0.0, min(a.top, b.top) - max(a.bottom, b.bottom))
    intersection = 0.0
    if overlap_z > 0:
        clipped = polygon_clip(a.corners_bev(), b.corners_bev())
        if len(clipped) >= 3:
            intersection = polygon_area(clipped) * overlap_z

    union = a.volume + b.volume - intersection
    if union <= 0:
        raise InvalidGeometryError(f'boxes {a} and {b} have no volume')
    return min(max(intersection / union, 0.0), 1.0)


@dataclass(frozen=True)
class OpeResult:
    """Success and Precision of a set of frames, both as percentages."""

    success: float
    precision: float
    ious: tuple[float, ...]
    distances: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.ious)


def success_curve(ious: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Get the fraction of frames with an overlap at or above each threshold."""
    return (np.asarray(ious)[:, None] >= SUCCESS_THRESHOLDS[None, :]).mean(axis=0)


def precision_curve(distances: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Get the fraction of frames with a centre error at or below each threshold."""
    return (np.asarray(distances)[:, None] <= PRECISION_THRESHOLDS[None, :]).mean(axis=0)


def _auc(curve: npt.NDArray[np.float64], thresholds: npt.NDArray[np.float64]) -> float:
    span = thresholds[-1] - thresholds[0]
    return float(np.trapezoid(curve, thresholds) / span * 100)


def ope_from_frames(ious: Sequence[float], distances: Sequence[float]) -> OpeResult:
    """Score per-frame overlaps and centre distances."""
    if not len(ious):
        raise ValueError('no frames to evaluate')
    if len(ious) != len(distances):
        raise ValueError(f'got {len(ious)} overlaps but {len(distances)} distances')
    return OpeResult(
        success=_auc(success_curve(ious), SUCCESS_THRESHOLDS),
        precision=_auc(precision_curve(distances), PRECISION_THRESHOLDS),
        ious=tuple(map(float, ious)),
        distances=tuple(map(float, distances)),
    )


def ope_metrics(predictions: Sequence[Box3D], ground_truth: Sequence[Box3D]) -> OpeResult:
    """Compute Success and Precision for aligned prediction and label lists.

    >>> box = Box3D(1, 2, 0, 4, 2, 1.5, 0.3)
    >>> result = ope_metrics([box] * 3, [box] * 3)
    >>> round(result.success, 9), round(result.precision, 9)
    (100.0, 100.0)

    Raises:
        ValueError: If the lists are empty or have different lengths.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f'got {len(predictions)} predictions for {len(ground_truth)} labels')
    if not predictions:
        raise ValueError('no frames to evaluate')
    ious = [iou3d(prediction, label) for prediction, label in zip(predictions, ground_truth)]
    distances = [calculate_distance(prediction.center, label.center)
                 for prediction, label in zip(predictions, ground_truth)]
    return ope_from_frames(ious, distances)


@dataclass(frozen=True)
class LatencyModel:
    """Source of per-frame processing times.

    Measured latency uses the tracker's own timing. Injected latency is
    either a constant or a per-frame list in seconds, indexed by stream
    position (the last value repeats).
    """

    kind: LatencyKind = LatencyKind.Measured
    latency: float | tuple[float, ...] | None = None
    data_rate: float = 10.0

    def __post_init__(self) -> None:
        if not self.data_rate > 0:
            raise ConfigError(f'data rate must be positive, got {self.data_rate}')
        if self.kind is LatencyKind.Injected:
            if self.latency is None:
                raise ConfigError('injected latency needs a value')
            values = self.latency if isinstance(self.latency, tuple) else (self.latency,)
            if not values or any(not value > 0 for value in values):
                raise ConfigError(f'injected latency must be positive, got {self.latency}')

    @classmethod
    def injected(cls, latency: float | Sequence[float], data_rate: float = 10.0) -> LatencyModel:
        if not isinstance(latency, (int, float)):
            latency = tuple(map(float, latency))
        return cls(LatencyKind.Injected, latency, data_rate)

    @classmethod
    def measured(cls, data_rate: float = 10.0) -> LatencyModel:
        return cls(LatencyKind.Measured, None, data_rate)

    @property
    def period(self) -> float:
        return 1 / self.data_rate

    def arrival(self, index: int) -> float:
        return index / self.data_rate

    def processing_time(self, index: int, record: TrackRecord) -> float:
        """Get how long processing stream frame `index` took in seconds."""
        match self.kind:
            case LatencyKind.Injected:
                if isinstance(self.latency, tuple):
                    return self.latency[min(index, len(self.latency) - 1)]
                return float(self.latency)  # type: ignore[arg-type]
            case LatencyKind.Measured:
                return record.elapsed_ns / 1e9
        raise NotImplementedError(self.kind)


class StreamingTracker(Protocol):
    """Anything that can follow an object through a stream of clouds."""

    def init(self, cloud: PointCloud, box: Box3D) -> TrackRecord: ...

    def step(self, cloud: PointCloud) -> TrackRecord: ...


class EchoTracker:
    """Mock tracker that returns the label of each frame.

    Frames without a label repeat the last returned box.
    """

    def __init__(self, track: Track) -> None:
        self.track = track
        self._last: Box3D | None = None

    def init(self, cloud: PointCloud, box: Box3D) -> TrackRecord:
        self._last = box
        return TrackRecord(cloud.frame_id, box)

    def step(self, cloud: PointCloud) -> TrackRecord:
        box = self.track.box_at(cloud.frame_id) or self._last
        if box is None:
            raise RuntimeError('tracker must be initialised before tracking')
        self._last = box
        return TrackRecord(cloud.frame_id, box)


TrackerFactory = Callable[[Track], StreamingTracker]


@dataclass(frozen=True)
class ModelTrackerFactory:
    """Build a fresh model tracker for every track."""

    model: SiameseModel
    config: TrackerConfig = field(default_factory=TrackerConfig)

    def __call__(self, track: Track) -> Tracker:
        return Tracker(self.model, self.config)


def echo_factory(track: Track) -> EchoTracker:
    return EchoTracker(track)


@dataclass(frozen=True)
class StreamTimeline:
    """What happened to every frame of a simulated stream.

    Frame 0 is the initial frame, taken as processed at time 0 with no
    cost. `processed_frames`, `starts`, `completions` and `elapsed` are
    aligned and only describe the frames after it.
    """

    data_rate: float
    arrivals: tuple[float, ...]
    processed_frames: tuple[int, ...]
    starts: tuple[float, ...]
    completions: tuple[float, ...]
    elapsed: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.arrivals)

    @property
    def dropped(self) -> tuple[bool, ...]:
        processed = {0, *self.processed_frames}
        return tuple(i not in processed for i in range(len(self.arrivals)))

    @property
    def dropped_count(self) -> int:
        return len(self.arrivals) - 1 - len(self.processed_frames)

    @property
    def frame_drop(self) -> float:
        """Get the percentage of frames after the first that were skipped."""
        if len(self.arrivals) < 2:
            return 0.0
        return self.dropped_count / (len(self.arrivals) - 1) * 100

    @property
    def processing_time(self) -> float:
        return math.fsum(self.elapsed)

    @property
    def fps(self) -> float:
        """Get the processed frames per second of processing time."""
        total = self.processing_time
        if not total:
            return math.inf if self.processed_frames else 0.0
        return len(self.processed_frames) / total

    def deadline(self, index: int, shift: int = 0) -> float:
        """Get the arrival time of a label, optionally shifted by whole frames.

        Deadlines past the end extend the stream at its data rate.
        """
        position = index + shift
        if position < len(self.arrivals):
            return self.arrivals[position]
        return self.arrivals[-1] + (position - len(self.arrivals) + 1) / self.data_rate

    def associated_frames(self, associations: Sequence[int]) -> list[int]:
        """Convert prediction positions (-1 for the initial box) to frame indices."""
        return [0 if j < 0 else self.processed_frames[j] for j in associations]


def _associate(timeline: StreamTimeline, shift: int) -> list[int]:
    associations = []
    j = -1
    for i in range(len(timeline)):
        deadline = timeline.deadline(i, shift) + TIME_TOLERANCE
        while (j + 1 < len(timeline.completions)
               and timeline.completions[j + 1] <= deadline
               and timeline.processed_frames[j + 1] <= i):
            j += 1
        associations.append(j)
    return associations


def associate_predictive(timeline: StreamTimeline) -> list[int]:
    """Match every label to the latest prediction completed by its arrival.

    Returns:
        Position of the prediction in `timeline.processed_frames` for
        each label, with -1 meaning the initial box.
    """
    return _associate(timeline, 0)


def associate_nonpredictive(timeline: StreamTimeline) -> list[int]:
    """Match every label to the latest prediction completed by the next arrival.

    Only predictions made from the label's own frame or earlier count.
    The final label's deadline is one frame period after the last arrival.
    """
    return _associate(timeline, 1)


class StreamWorker:
    """Single worker that always processes the newest arrived frame."""

    def __init__(self, env: simpy.Environment, tracker: StreamingTracker, clouds: Sequence[PointCloud],
                 latency: LatencyModel) -> None:
        self.env = env
        self.tracker = tracker
        self.clouds = clouds
        self.latency = latency
        self.last_processed = 0
        self.processed: list[int] = []
        self.starts: list[float] = []
        self.completions: list[float] = []
        self.elapsed: list[float] = []
        self.boxes: list[Box3D] = []
        self.process = env.process(self.work())

    def latest_arrived(self) -> int:
        """Get the newest frame that has arrived by now."""
        index = math.floor((self.env.now + TIME_TOLERANCE) * self.latency.data_rate)
        while index > 0 and self.latency.arrival(index) > self.env.now + TIME_TOLERANCE:
            index -= 1
        while index + 1 < len(self.clouds) and self.latency.arrival(index + 1) <= self.env.now + TIME_TOLERANCE:
            index += 1
        return min(index, len(self.clouds) - 1)

    def work(self):
        while self.last_processed < len(self.clouds) - 1:
            index = self.latest_arrived()
            if index <= self.last_processed:
                yield self.env.timeout(max(self.latency.arrival(self.last_processed + 1) - self.env.now, 0.0))
                continue

            start = self.env.now
            record = self.tracker.step(self.clouds[index])
            duration = self.latency.processing_time(len(self.processed), record)
            yield self.env.timeout(duration)

            self.last_processed = index
            self.processed.append(index)
            self.starts.append(start)
            self.completions.append(self.env.now)
            self.elapsed.append(duration)
            self.boxes.append(record.box)


def simulate_stream(tracker: StreamingTracker, clouds: Sequence[PointCloud], init_box: Box3D,
                    latency: LatencyModel) -> tuple[StreamTimeline, list[Box3D]]:
    """Replay clouds as a sensor stream through a single worker.

    The tracker is initialised on the first cloud for free at time 0.

    Returns:
        The timeline, and the predicted box of every processed frame
        in processing order.
    """
    if len(clouds) < 2:
        raise ValueError(f'a stream needs at least 2 frames, got {len(clouds)}')

    tracker.init(clouds[0], init_box)
    env = simpy.Environment()
    worker = StreamWorker(env, tracker, clouds, latency)
    env.run(until=worker.process)

    timeline = StreamTimeline(
        data_rate=latency.data_rate,
        arrivals=tuple(latency.arrival(i) for i in range(len(clouds))),
        processed_frames=tuple(worker.processed),
        starts=tuple(worker.starts),
        completions=tuple(worker.completions),
        elapsed=tuple(worker.elapsed),
    )
    logger.debug('Simulated %d frames, %d processed, %.1f%% dropped',
                 len(clouds), len(worker.processed), timeline.frame_drop)
    return timeline, worker.boxes


class SequenceResult(NamedTuple):
    """Evaluation of one track under one mode."""

    sequence_id: int
    object_id: int
    mode: EvalMode
    ope: OpeResult
    fps: float
    frame_drop: float
    associations: tuple[int, ...]


class EvalFailure(NamedTuple):
    sequence_id: int
    object_id: int
    message: str


def _track_clouds(sequence: SequenceData, track: Track) -> list[PointCloud]:
    return [sequence.clouds[frame_id] for frame_id in track.frame_ids]


def offline_eval(tracker: StreamingTracker, sequence: SequenceData, track: Track,
                 latency: LatencyModel | None = None) -> SequenceResult:
    """Run the tracker on every frame of a track and score it."""
    latency = latency or LatencyModel.measured(sequence.data_rate)
    clouds = _track_clouds(sequence, track)
    init_box = track.frames[0][1]
    tracker.init(clouds[0], init_box)

    predictions = [init_box]
    elapsed = []
    for position, cloud in enumerate(clouds[1:]):
        record = tracker.step(cloud)
        predictions.append(record.box)
        elapsed.append(latency.processing_time(position, record))

    total = math.fsum(elapsed)
    fps = len(elapsed) / total if total else math.inf
    return SequenceResult(sequence.sequence_id, track.object_id, EvalMode.Offline,
                          ope_metrics(predictions, track.boxes), fps, 0.0,
                          tuple(range(len(clouds))))


def score_stream(timeline: StreamTimeline, boxes: Sequence[Box3D], track: Track, mode: EvalMode,
                 sequence_id: int) -> SequenceResult:
    """Score a simulated stream under a real-time mode."""
    match mode:
        case EvalMode.Predictive:
            associations = associate_predictive(timeline)
        case EvalMode.NonPredictive:
            associations = associate_nonpredictive(timeline)
        case _:
            raise ValueError(f'{mode.value} is not a real-time mode')

    init_box = track.frames[0][1]
    predictions = [init_box if j < 0 else boxes[j] for j in associations]
    return SequenceResult(sequence_id, track.object_id, mode, ope_metrics(predictions, track.boxes),
                          timeline.fps, timeline.frame_drop, tuple(timeline.associated_frames(associations)))


def realtime_eval_track(tracker: StreamingTracker, sequence: SequenceData, track: Track,
                        latency: LatencyModel, modes: Iterable[EvalMode]) -> list[SequenceResult]:
    """Simulate one stream and score it under every requested real-time mode."""
    timeline, boxes = simulate_stream(tracker, _track_clouds(sequence, track), track.frames[0][1], latency)
    return [score_stream(timeline, boxes, track, mode, sequence.sequence_id) for mode in modes]


@dataclass(frozen=True)
class EvalTask:
    sequence: SequenceData
    track: Track
    factory: TrackerFactory
    latency: LatencyModel
    modes: tuple[EvalMode, ...]


def _run_task(task: EvalTask) -> list[SequenceResult] | EvalFailure:
    """Evaluate a track under all modes, capturing any failure."""
    sequence, track = task.sequence, task.track
    try:
        if len(track) < 2:
            raise ValueError(f'track has {len(track)} frame, at least 2 are needed')
        results = []
        if EvalMode.Offline in task.modes:
            results.append(offline_eval(task.factory(track), sequence, track, task.latency))
        realtime = tuple(mode for mode in task.modes if mode.is_realtime)
        if realtime:
            results += realtime_eval_track(task.factory(track), sequence, track, task.latency, realtime)
        return results
    except Exception as e:
        return EvalFailure(sequence.sequence_id, track.object_id, f'{type(e).__name__}: {e}')


@dataclass(frozen=True)
class ModeSummary:
    """Aggregate over all tracks of a mode.

    Success and Precision are computed over the frames of all tracks
    together. FPS is the mean over tracks, and the frame drop is taken
    over all frames.
    """

    mode: EvalMode
    ope: OpeResult
    fps: float
    frame_drop: float
    sequences: int


@dataclass
class EvalReport:
    results: list[SequenceResult] = field(default_factory=list)
    failures: list[EvalFailure] = field(default_factory=list)

    def summary(self, mode: EvalMode) -> ModeSummary | None:
        results = [result for result in self.results if result.mode is mode]
        if not results:
            return None
        ious = [iou for result in results for iou in result.ope.ious]
        distances = [distance for result in results for distance in result.ope.distances]
        dropped = sum(result.frame_drop * (len(result.ope) - 1) / 100 for result in results)
        total = sum(len(result.ope) - 1 for result in results)
        finite_fps = [result.fps for result in results if math.isfinite(result.fps)]
        return ModeSummary(
            mode=mode,
            ope=ope_from_frames(ious, distances),
            fps=float(np.mean(finite_fps)) if finite_fps else math.inf,
            frame_drop=dropped / total * 100 if total else 0.0,
            sequences=len(results),
        )


def run_evaluation(sequences: Iterable[SequenceData], factory: TrackerFactory, latency: LatencyModel,
                   modes: Sequence[EvalMode], workers: int = 1, progress: bool = True) -> EvalReport:
    """Evaluate every track of every sequence.

    Failing tracks are logged and listed in the report, the others carry on.
    With more than one worker, tracks are evaluated in separate processes,
    each with its own tracker.
    """
    tasks = [EvalTask(sequence, track, factory, latency, tuple(modes))
             for sequence in sequences for track in sequence.tracks]
    report = EvalReport()
    if not tasks:
        logger.warning('Nothing to evaluate, no tracks found')
        return report

    if workers > 1 and len(tasks) > 1:
        with multiprocessing.get_context('spawn').Pool(min(workers, len(tasks))) as pool:
            outputs = list(tqdm(pool.imap(_run_task, tasks), total=len(tasks), desc='Evaluating',
                                disable=not progress))
    else:
        outputs = [_run_task(task) for task in tqdm(tasks, desc='Evaluating', disable=not progress)]

    for output in outputs:
        if isinstance(output, EvalFailure):
            logger.warning('Evaluation of sequence %d object %d failed: %s',
                           output.sequence_id, output.object_id, output.message)
            report.failures.append(output)
        else:
            report.results += output
    return report


def realtime_eval(factory: TrackerFactory, sequences: Iterable[SequenceData], latency: LatencyModel,
                  mode: EvalMode, workers: int = 1, progress: bool = False) -> EvalReport:
    """Run the streaming benchmark under one real-time mode."""
    if not mode.is_realtime:
        raise ValueError(f'{mode.value} is not a real-time mode')
    return run_evaluation(sequences, factory, latency, [mode], workers, progress)
