"""Training pairs, label maps and the training loop.

Two kinds of target/search pairs are used. Detection pairs take both
regions from the same frame, and tracking pairs take the target from one
frame and the search from another frame of the same object. The search
centre is shifted randomly so the object is not always in the middle.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .checkpoint import Checkpoint
from .constants import LOSS_CURVE_NAME
from .dataset import DatasetManifest, LabeledFrame, SequenceData
from .exceptions import CheckpointError, ConfigError, DataError, OutOfRangeError
from .geometry import box_to_region
from .nn.layers import Array
from .nn.loss import LossSpec, weighted_bce
from .nn.model import SiameseModel
from .nn.optim import Adam
from .tracker import TrackerConfig, add_context, make_search
from .types import Box3D, GridSpec, PointCloud, Region2D, Track
from .utils.math import rotation_matrix


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters."""

    steps: int = 64000
    lr: float = 1e-5
    label_radius: float = 2.0
    v_min: float = 0.5
    v_max: float = 1.0
    samples_per_object: int = 8
    detection_pairs: bool = True
    shift: bool = True
    global_rotation: bool = True
    global_translation: bool = True
    rotation_limit: float = math.radians(5)
    translation_limit: float = 0.5
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f'train.steps must not be negative, got {self.steps}')
        if self.lr < 0:
            raise ConfigError(f'train.lr must not be negative, got {self.lr}')
        if self.label_radius < 1:
            raise ConfigError(f'train.label_radius must be at least 1, got {self.label_radius}')
        if not 0 <= self.v_min <= self.v_max <= 1:
            raise ConfigError(f'train.v_min and train.v_max must satisfy 0 <= v_min <= v_max <= 1, '
                              f'got {self.v_min} and {self.v_max}')
        if self.samples_per_object < 1:
            raise ConfigError(f'train.samples_per_object must be at least 1, got {self.samples_per_object}')
        if self.checkpoint_every < 1:
            raise ConfigError(f'train.checkpoint_every must be at least 1, got {self.checkpoint_every}')
        if self.rotation_limit < 0 or self.translation_limit < 0:
            raise ConfigError('train augmentation limits must not be negative')

    @classmethod
    def desk(cls, **kwargs: object) -> TrainConfig:
        """Preset that trains in minutes on a CPU."""
        return cls(**{'steps': 2000, 'lr': 1e-3, **kwargs})  # type: ignore[arg-type]


@dataclass(frozen=True, eq=False)
class TrainSample:
    """A target/search pair.

    `search_target` is where the object is in the search cloud, which is
    what the label map is centred on. `fallback` is set when a tracking
    pair could not be made because the track only has one frame.
    """

    target_cloud: PointCloud
    target_region: Region2D
    search_cloud: PointCloud
    search_region: Region2D
    search_target: Region2D
    fallback: bool = False


def shift_augment(search: Region2D, target: Region2D, rng: np.random.Generator) -> Region2D:
    """Move the search centre away from the target centre.

    The shift is drawn uniformly along the search region's own axes, up
    to the point where the target would touch the search border.
    """
    limit_x = max(search.w - target.w, 0.0) / 2
    limit_y = max(search.h - target.h, 0.0) / 2
    epsilon = np.array([rng.uniform(-limit_x, limit_x), rng.uniform(-limit_y, limit_y)])
    dx, dy = rotation_matrix(search.alpha) @ epsilon
    return search.with_center(target.x + float(dx), target.y + float(dy))


def make_pair_regions(box: Box3D, grid: GridSpec, tracker_config: TrackerConfig,
                      rng: np.random.Generator | None) -> tuple[Region2D, Region2D]:
    """Get the target region and the (optionally shifted) search region of a box."""
    target = add_context(box_to_region(box, grid), tracker_config.context_amount)
    search = make_search(target, tracker_config.search_scale)
    if rng is not None:
        search = shift_augment(search, target, rng)
    return target, search


def sample_detection_pairs(frame: LabeledFrame, grid: GridSpec, tracker_config: TrackerConfig,
                           config: TrainConfig, rng: np.random.Generator) -> list[TrainSample]:
    """Make one pair per object, with both regions from the same frame."""
    samples = []
    for object_id in sorted(frame.boxes):
        try:
            target, search = make_pair_regions(frame.boxes[object_id], grid, tracker_config,
                                               rng if config.shift else None)
        except OutOfRangeError:
            logger.debug('Skipping object %d of frame %d, outside the grid', object_id, frame.cloud.frame_id)
            continue
        samples.append(TrainSample(frame.cloud, target, frame.cloud, search, target))
    return samples


def sample_tracking_pairs(track: Track, clouds: dict[int, PointCloud], grid: GridSpec,
                          tracker_config: TrackerConfig, config: TrainConfig,
                          rng: np.random.Generator) -> list[TrainSample]:
    """Make `samples_per_object` pairs from two different frames of a track.

    The target comes from the first frame, and the search region is built
    around the object's box in the second frame. A track with a single
    frame falls back to detection style pairs, which are flagged.
    """
    frames = track.frames
    if len(frames) < 2:
        logger.warning('Track %d:%d has a single frame, using detection pairs instead',
                       track.track_id, track.object_id)
        frame_id, box = frames[0]
        cloud = clouds[frame_id]
        samples = []
        for _ in range(config.samples_per_object):
            target, search = make_pair_regions(box, grid, tracker_config, rng if config.shift else None)
            samples.append(TrainSample(cloud, target, cloud, search, target, fallback=True))
        return samples

    samples = []
    for _ in range(config.samples_per_object):
        first, second = rng.choice(len(frames), size=2, replace=False)
        target_frame, target_box = frames[first]
        search_frame, search_box = frames[second]
        target = add_context(box_to_region(target_box, grid), tracker_config.context_amount)
        search_target, search = make_pair_regions(search_box, grid, tracker_config, rng if config.shift else None)
        samples.append(TrainSample(clouds[target_frame], target, clouds[search_frame], search, search_target))
    return samples


def global_augment(sample: TrainSample, grid: GridSpec, config: TrainConfig,
                   rng: np.random.Generator) -> TrainSample:
    """Apply one random rotation about the sensor and one translation to a pair."""
    angle = rng.uniform(-config.rotation_limit, config.rotation_limit) if config.global_rotation else 0.0
    if config.global_translation:
        tx, ty = rng.uniform(-config.translation_limit, config.translation_limit, 2)
    else:
        tx = ty = 0.0
    if not angle and not tx and not ty:
        return sample
    translation = (float(tx), float(ty), 0.0)

    def move(region: Region2D) -> Region2D:
        x, y = grid.to_meters(region.x, region.y)
        (x, y), = (np.array([[x, y]]) @ rotation_matrix(angle).T)
        px, py = grid.to_pixels(float(x) + translation[0], float(y) + translation[1])
        return Region2D(px, py, region.w, region.h, region.alpha + angle)

    target_cloud = sample.target_cloud.transformed(angle, translation)
    if sample.search_cloud is sample.target_cloud:
        search_cloud = target_cloud
    else:
        search_cloud = sample.search_cloud.transformed(angle, translation)
    return replace(sample, target_cloud=target_cloud, target_region=move(sample.target_region),
                   search_cloud=search_cloud, search_region=move(sample.search_region),
                   search_target=move(sample.search_target))


def make_label_map(size: tuple[int, int], center: tuple[float, float], radius: float,
                   v_min: float = 0.5, v_max: float = 1.0) -> npt.NDArray[np.float64]:
    """Create the soft label map around a (row, column) centre.

    Values fall linearly from `v_max` at the centre to `v_min` at the
    radius, continue falling up to one pixel past it, and are zero
    beyond that. Everything is clipped to [0, 1].
    """
    rows, columns = np.mgrid[0:size[0], 0:size[1]].astype(np.float64)
    distance = np.hypot(rows - center[0], columns - center[1])
    values = v_min * distance / radius + v_max * (1 - distance / radius)
    values[distance > radius + 1] = 0.0
    return np.clip(values, 0.0, 1.0)


def balance_weights(labels: npt.NDArray[np.floating]) -> npt.NDArray[np.float64]:
    """Weight positive (> 0) and negative pixels to equal total weight.

    >>> weights = balance_weights(np.array([1.0] + [0.0] * 99))
    >>> float(weights[0]), round(float(weights[1]), 6)
    (50.0, 0.505051)
    """
    positive = labels > 0
    total = labels.size
    positives = int(positive.sum())
    negatives = total - positives
    if not positives or not negatives:
        return np.ones(labels.shape, dtype=np.float64)
    return np.where(positive, total / (2 * positives), total / (2 * negatives))


def label_center(sample: TrainSample, score_size: tuple[int, int]) -> tuple[float, float]:
    """Find where the object centre falls in the score map, as (row, column).

    This is the inverse of `decode_offset`: one score pixel spans the
    search side over the map side, measured from the map centre in the
    search region's own frame.

    >>> sample = TrainSample(PointCloud.empty(), Region2D(0, 0, 4, 4, 0), PointCloud.empty(),
    ...                      Region2D(0, 0, 62, 62, 0), Region2D(6, -4, 4, 4, 0))
    >>> label_center(sample, (31, 31))
    (13.0, 18.0)
    """
    search = sample.search_region
    target = sample.search_target
    local_x, local_y = rotation_matrix(-search.alpha) @ np.array([target.x - search.x, target.y - search.y])
    rows, columns = score_size
    return ((rows - 1) / 2 + float(local_y) * rows / search.h,
            (columns - 1) / 2 + float(local_x) * columns / search.w)


def train_step(model: SiameseModel, optimizer: Adam, sample: TrainSample, config: TrainConfig,
               tracker_config: TrackerConfig) -> float:
    """Run one forward, backward and Adam update on a sample.

    Returns:
        The loss before the update.
    """
    logits = model.forward_pair(sample.target_cloud, sample.target_region,
                                sample.search_cloud, sample.search_region,
                                tracker_config.target_interp_size, tracker_config.search_interp_size)
    center = label_center(sample, logits.shape)
    labels = make_label_map(logits.shape, center, config.label_radius, config.v_min, config.v_max)
    spec = LossSpec(labels.astype(logits.dtype), balance_weights(labels).astype(logits.dtype))
    loss, grad = weighted_bce(logits, spec)
    optimizer.step(model.backward(grad))
    return loss


class TrainingSet:
    """Deterministic source of training samples.

    Every epoch holds, per object, `samples_per_object` tracking pairs
    and (if enabled) `samples_per_object` detection pairs from random
    frames of the object. The epoch contents and order are drawn from
    `(seed, epoch)`, so any step can be reproduced without replaying the
    ones before it.
    """

    def __init__(self, sequences: Iterable[SequenceData], grid: GridSpec, config: TrainConfig,
                 tracker_config: TrackerConfig) -> None:
        self.sequences = list(sequences)
        self.grid = grid
        self.config = config
        self.tracker_config = tracker_config
        self._epoch: tuple[int, list[TrainSample]] | None = None
        if not any(sequence.tracks for sequence in self.sequences):
            raise DataError('training set has no labelled objects')

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, grid: GridSpec, config: TrainConfig,
                      tracker_config: TrackerConfig) -> TrainingSet:
        return cls(list(manifest), grid, config, tracker_config)

    def epoch(self, index: int) -> list[TrainSample]:
        """Get the shuffled samples of an epoch."""
        if self._epoch is not None and self._epoch[0] == index:
            return self._epoch[1]

        rng = np.random.default_rng([self.config.seed, index])
        samples: list[TrainSample] = []
        for sequence in self.sequences:
            for track in sequence.tracks:
                samples += sample_tracking_pairs(track, sequence.clouds, self.grid, self.tracker_config,
                                                 self.config, rng)
                if not self.config.detection_pairs:
                    continue
                for _ in range(self.config.samples_per_object):
                    frame_id, box = track.frames[int(rng.integers(len(track.frames)))]
                    frame = LabeledFrame(sequence.clouds[frame_id], {track.object_id: box})
                    samples += sample_detection_pairs(frame, self.grid, self.tracker_config, self.config, rng)
        if not samples:
            raise DataError('no training samples could be made, every object is outside the grid')

        samples = [samples[i] for i in rng.permutation(len(samples))]
        self._epoch = (index, samples)
        return samples

    def sample(self, step: int) -> TrainSample:
        """Get the augmented sample for a global step."""
        epoch_length = len(self.epoch(0))
        sample = self.epoch(step // epoch_length)[step % epoch_length]
        return global_augment(sample, self.grid, self.config, np.random.default_rng([self.config.seed, step, 1]))


class LossRecord(NamedTuple):
    step: int
    loss: float


def read_loss_curve(path: str | os.PathLike) -> list[LossRecord]:
    """Read `step<TAB>loss` lines."""
    records = []
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                step, loss = line.split('\t')
                records.append(LossRecord(int(step), float(loss)))
            except ValueError as e:
                raise DataError(f'{path}:{line_number}: invalid loss record ({e})') from e
    return records


def write_loss_curve(path: str | os.PathLike, records: Iterable[LossRecord]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for step, loss in records:
            f.write(f'{step}\t{loss!r}\n')


def train_loop(training_set: TrainingSet, model: SiameseModel, config: TrainConfig,
               output_dir: str | os.PathLike, resume: Checkpoint | None = None,
               progress: bool = True) -> list[LossRecord]:
    """Train the model, writing checkpoints and the loss curve.

    `checkpoint.vtc` and `loss.tsv` in `output_dir` are rewritten every
    `checkpoint_every` steps and at the end. When resuming, steps carry
    on from the checkpoint and the curve keeps its earlier records.

    Raises:
        CheckpointError: If writing fails, naming the step.
    """
    output_dir = Path(output_dir)
    checkpoint_path = output_dir / 'checkpoint.vtc'
    curve_path = output_dir / LOSS_CURVE_NAME

    optimizer = Adam(model.params, lr=config.lr)
    start = 0
    records: list[LossRecord] = []
    if resume is not None:
        optimizer.state = resume.optimizer
        start = resume.step
        if curve_path.exists():
            records = [record for record in read_loss_curve(curve_path) if record.step < start]
        logger.info('Resuming training from step %d', start)

    def save(step: int) -> None:
        try:
            output_dir.mkdir(parents=True, exist_ok=True)
            Checkpoint(model, step, optimizer.state).save(checkpoint_path)
            write_loss_curve(curve_path, records)
        except OSError as e:
            raise CheckpointError(f'unable to write checkpoint at step {step}: {e}') from e

    for step in tqdm(range(start, config.steps), initial=start, total=config.steps,
                     desc='Training', disable=not progress):
        loss = train_step(model, optimizer, training_set.sample(step), config, training_set.tracker_config)
        records.append(LossRecord(step, loss))
        if (step + 1) % config.checkpoint_every == 0:
            save(step + 1)

    if not records or config.steps % config.checkpoint_every or start >= config.steps:
        save(max(config.steps, start))
    if records:
        logger.info('Finished training at step %d, final loss %.5f', max(config.steps, start), records[-1].loss)
    return records
