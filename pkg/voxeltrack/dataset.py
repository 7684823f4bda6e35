"""Synthetic scenes and KITTI style dataset files.

Datasets are stored in the KITTI tracking layout:

    <root>/velodyne/<sequence:04d>/<frame:06d>.bin
    <root>/label_02/<sequence:04d>.txt
    <root>/<split>.yaml

Each velodyne file holds little endian float32 (x, y, z, reflectance)
records. Label files use the KITTI tracking text layout, with the
location read as the box centre in the Lidar frame and the (h, w, l)
dimensions mapped to the (d, h, w) of a `Box3D`.

A split manifest is a YAML mapping:

    version: 1
    split: train
    class_name: Car
    data_rate: 10.0
    sequences:
      - id: 0
        velodyne: velodyne/0000
        labels: label_02/0000.txt
        frames: [0, 1, 2, ...]
"""

from __future__ import annotations

import logging
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import numpy.typing as npt
import yaml

from .constants import DEFAULT_CLASS, KITTI_POINT_BYTES, MANIFEST_VERSION
from .exceptions import ConfigError, DataError
from .types import Box3D, GridSpec, PointCloud, Track
from .utils.math import rotation_matrix


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneConfig:
    """Settings for generating a synthetic sequence.

    Footprint ranges are in meters, `w` along the heading. Speeds are
    in m/s and turn rates in rad/s, both drawn uniformly per object.
    """

    objects: int = 3
    width_range: tuple[float, float] = (3.5, 4.5)
    height_range: tuple[float, float] = (1.5, 1.9)
    depth_range: tuple[float, float] = (1.4, 1.7)
    speed_range: tuple[float, float] = (0.0, 8.0)
    turn_rate_range: tuple[float, float] = (0.0, 0.0)
    point_density: float = 40.0
    clutter_points: int = 300
    noise: float = 0.02
    frames: int = 40
    data_rate: float = 10.0
    spawn_radius: float = 20.0
    ground_z: float = -1.73
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ('width_range', 'height_range', 'depth_range', 'speed_range', 'turn_rate_range'):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2 or value[0] > value[1]:
                raise ConfigError(f'scene.{name} must be a [low, high] pair, got {list(value)}')
            object.__setattr__(self, name, value)
        for name in ('width_range', 'height_range', 'depth_range'):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f'scene.{name} must be positive')
        for name in ('objects', 'clutter_points', 'frames'):
            if getattr(self, name) < 0:
                raise ConfigError(f'scene.{name} must not be negative, got {getattr(self, name)}')
        if self.point_density <= 0:
            raise ConfigError(f'scene.point_density must be positive, got {self.point_density}')
        if self.noise < 0:
            raise ConfigError(f'scene.noise must not be negative, got {self.noise}')
        if self.data_rate <= 0:
            raise ConfigError(f'scene.data_rate must be positive, got {self.data_rate}')


@dataclass(frozen=True)
class DatasetConfig:
    """Where a dataset lives and how it is split."""

    root: str = 'data'
    train_sequences: int = 8
    val_sequences: int = 2
    test_sequences: int = 2
    class_name: str = DEFAULT_CLASS

    def __post_init__(self) -> None:
        for name in ('train_sequences', 'val_sequences', 'test_sequences'):
            if getattr(self, name) < 0:
                raise ConfigError(f'dataset.{name} must not be negative, got {getattr(self, name)}')

    def split_counts(self) -> dict[str, int]:
        return {'train': self.train_sequences, 'val': self.val_sequences, 'test': self.test_sequences}


class LabeledFrame(NamedTuple):
    """A point cloud with the boxes of every object in it."""

    cloud: PointCloud
    boxes: dict[int, Box3D]


@dataclass(frozen=True)
class SequenceData:
    """A loaded sequence: clouds by frame id and the object tracks."""

    sequence_id: int
    clouds: dict[int, PointCloud]
    tracks: list[Track]
    data_rate: float

    @property
    def frame_ids(self) -> list[int]:
        return sorted(self.clouds)


def _object_pose(start: npt.NDArray[np.float64], heading: float, speed: float, turn_rate: float,
                 t: float) -> tuple[float, float, float]:
    """Position and heading after `t` seconds on a constant velocity arc."""
    if turn_rate == 0:
        return (float(start[0] + speed * t * math.cos(heading)),
                float(start[1] + speed * t * math.sin(heading)), heading)
    angle = heading + turn_rate * t
    radius = speed / turn_rate
    return (float(start[0] + radius * (math.sin(angle) - math.sin(heading))),
            float(start[1] - radius * (math.cos(angle) - math.cos(heading))), angle)


def sample_box_surface(box: Box3D, density: float, rng: np.random.Generator) -> npt.NDArray[np.float64]:
    """Sample points on the faces of a box that face the sensor.

    A face is kept when its outward normal points towards the origin.
    The bottom face is never sampled.

    Returns:
        An (N, 3) array of points.
    """
    half = np.array([box.w / 2, box.h / 2, box.d / 2])
    rotation = rotation_matrix(box.alpha)
    centre = np.array(box.center)

    # (axis, sign) of each face in the box frame
    faces = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)]
    samples = []
    for axis, sign in faces:
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        normal = normal_local.copy()
        normal[:2] = rotation @ normal_local[:2]
        face_centre = centre + normal * half[axis]
        if np.dot(normal, -face_centre) <= 0:
            continue

        others = [i for i in range(3) if i != axis]
        area = 4 * half[others[0]] * half[others[1]]
        count = int(round(density * area))
        local = np.empty((count, 3))
        local[:, axis] = sign * half[axis]
        for i in others:
            local[:, i] = rng.uniform(-half[i], half[i], count)
        points = local.copy()
        points[:, :2] = local[:, :2] @ rotation.T
        samples.append(points + centre)

    if not samples:
        return np.zeros((0, 3))
    return np.concatenate(samples)


def generate_scene(config: SceneConfig, grid: GridSpec | None = None, stream: int = 0) -> list[LabeledFrame]:
    """Generate a deterministic synthetic sequence.

    Objects move on constant velocity arcs and only their sensor facing
    surfaces are sampled. Clutter is spread uniformly over the grid and
    Gaussian noise is added to every point. Everything is drawn from a
    generator seeded with `(config.seed, stream)`.
    """
    if grid is None:
        grid = GridSpec()
    rng = np.random.default_rng([config.seed, stream])

    objects = []
    for _ in range(config.objects):
        size = (rng.uniform(*config.width_range), rng.uniform(*config.height_range), rng.uniform(*config.depth_range))
        distance = rng.uniform(0.25, 1.0) * config.spawn_radius
        bearing = rng.uniform(-math.pi, math.pi)
        start = np.array([distance * math.cos(bearing), distance * math.sin(bearing)])
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*config.speed_range)
        turn_rate = rng.uniform(*config.turn_rate_range)
        objects.append((size, start, heading, speed, turn_rate))

    frames = []
    for frame_id in range(config.frames):
        t = frame_id / config.data_rate
        boxes: dict[int, Box3D] = {}
        chunks = []
        for object_id, (size, start, heading, speed, turn_rate) in enumerate(objects):
            x, y, alpha = _object_pose(start, heading, speed, turn_rate, t)
            w, h, d = size
            box = Box3D(x, y, config.ground_z + d / 2, w, h, d, alpha)
            boxes[object_id] = box
            surface = sample_box_surface(box, config.point_density, rng)
            chunks.append(np.column_stack([surface, rng.uniform(0.2, 0.9, len(surface))]))

        clutter = np.column_stack([
            rng.uniform(grid.x_min, grid.x_max, config.clutter_points),
            rng.uniform(grid.y_min, grid.y_max, config.clutter_points),
            rng.uniform(grid.z_min, grid.z_max, config.clutter_points),
            rng.uniform(0.0, 1.0, config.clutter_points),
        ])
        chunks.append(clutter)

        points = np.concatenate(chunks)
        if config.noise and len(points):
            points[:, :3] += rng.normal(0.0, config.noise, (len(points), 3))
        frames.append(LabeledFrame(PointCloud(points, frame_id), boxes))
    return frames


def scene_tracks(frames: list[LabeledFrame], sequence_id: int = 0, class_name: str = DEFAULT_CLASS) -> list[Track]:
    """Group the per-frame boxes of a scene into tracks."""
    grouped: dict[int, list[tuple[int, Box3D]]] = defaultdict(list)
    for frame in frames:
        for object_id, box in frame.boxes.items():
            grouped[object_id].append((frame.cloud.frame_id, box))
    return [Track(sequence_id, object_id, tuple(grouped[object_id]), class_name) for object_id in sorted(grouped)]


def read_kitti_velodyne(path: str | os.PathLike, frame_id: int | None = None) -> PointCloud:
    """Read a velodyne binary file.

    Raises:
        DataError: If the file can't be read or its size is not a
            multiple of 16 bytes.
    """
    path = Path(path)
    try:
        size = path.stat().st_size
        if size % KITTI_POINT_BYTES:
            raise DataError(f'{path}: size of {size} bytes is not a multiple of {KITTI_POINT_BYTES}')
        points = np.fromfile(path, dtype='<f4').reshape(-1, 4)
    except OSError as e:
        raise DataError(f'{path}: unable to read point cloud ({e})') from e

    if frame_id is None:
        frame_id = int(path.stem) if path.stem.isdigit() else 0
    return PointCloud(points.astype(np.float64), frame_id)


def write_kitti_velodyne(path: str | os.PathLike, cloud: PointCloud) -> None:
    """Write a cloud as little endian float32 records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cloud.points.astype('<f4').tofile(path)


def _parse_label_line(line: str, path: Path, line_number: int) -> tuple[int, int, str, Box3D] | None:
    fields = line.split()
    if len(fields) not in (17, 18):
        raise DataError(f'{path}:{line_number}: expected 17 or 18 fields, got {len(fields)}')
    try:
        frame_id = int(fields[0])
        object_id = int(fields[1])
        class_name = fields[2]
        height, width, length = (float(v) for v in fields[10:13])
        x, y, z = (float(v) for v in fields[13:16])
        rotation = float(fields[16])
    except ValueError as e:
        raise DataError(f'{path}:{line_number}: {e}') from e
    if object_id < 0:
        return None
    try:
        box = Box3D(x, y, z, length, width, height, rotation)
    except ValueError as e:
        raise DataError(f'{path}:{line_number}: {e}') from e
    return frame_id, object_id, class_name, box


def read_tracking_labels(path: str | os.PathLike, class_name: str | None = DEFAULT_CLASS,
                         sequence_id: int | None = None) -> list[Track]:
    """Read a KITTI tracking label file into tracks.

    Rows are grouped by track id and sorted by frame. Rows with a
    negative track id (DontCare) are skipped, and `class_name` of None
    keeps every class.

    Raises:
        DataError: If the file is unreadable or a line is malformed.
    """
    path = Path(path)
    if sequence_id is None:
        sequence_id = int(path.stem) if path.stem.isdigit() else 0
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise DataError(f'{path}: unable to read labels ({e})') from e

    rows: dict[int, dict[int, Box3D]] = defaultdict(dict)
    classes: dict[int, str] = {}
    for line_number, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parsed = _parse_label_line(line, path, line_number)
        if parsed is None:
            continue
        frame_id, object_id, row_class, box = parsed
        if class_name is not None and row_class != class_name:
            continue
        if frame_id in rows[object_id]:
            raise DataError(f'{path}:{line_number}: duplicate label for object {object_id} in frame {frame_id}')
        rows[object_id][frame_id] = box
        classes[object_id] = row_class

    return [Track(sequence_id, object_id, tuple(sorted(rows[object_id].items())), classes[object_id])
            for object_id in sorted(rows)]


def write_tracking_labels(path: str | os.PathLike, tracks: list[Track]) -> None:
    """Write tracks in the KITTI tracking label layout."""
    lines = []
    for track in tracks:
        for frame_id, box in track.frames:
            values = (box.d, box.h, box.w, box.x, box.y, box.z, box.alpha)
            lines.append((frame_id, track.object_id,
                          f'{frame_id} {track.object_id} {track.class_name} 0 0 {box.alpha!r} -1 -1 -1 -1 '
                          + ' '.join(repr(float(v)) for v in values)))
    lines.sort()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f'{line}\n' for _, _, line in lines), encoding='utf-8')


@dataclass(frozen=True)
class SequenceEntry:
    """Locator of one sequence within a dataset root."""

    id: int
    velodyne: str
    labels: str
    frames: list[int] = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Index of the sequences of a dataset split."""

    root: Path
    split: str = 'train'
    class_name: str = DEFAULT_CLASS
    data_rate: float = 10.0
    sequences: list[SequenceEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def save(self, path: str | os.PathLike) -> None:
        data = {
            'version': self.version,
            'split': self.split,
            'class_name': self.class_name,
            'data_rate': self.data_rate,
            'sequences': [asdict(entry) for entry in self.sequences],
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(data, f, sort_keys=False, default_flow_style=None)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Self:
        """Load a manifest, resolving sequence paths relative to it.

        Raises:
            DataError: If the manifest is missing or malformed, or it
                references missing files.
        """
        path = Path(path)
        try:
            with open(path, encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise DataError(f'{path}: unable to read manifest ({e})') from e
        except yaml.YAMLError as e:
            raise DataError(f'{path}: invalid manifest ({e})') from e

        try:
            manifest = cls(
                root=path.parent,
                split=str(data['split']),
                class_name=str(data.get('class_name', DEFAULT_CLASS)),
                data_rate=float(data['data_rate']),
                sequences=[SequenceEntry(int(entry['id']), str(entry['velodyne']), str(entry['labels']),
                                         [int(frame) for frame in entry['frames']])
                           for entry in data['sequences']],
                version=int(data['version']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f'{path}: invalid manifest ({e!r})') from e
        if manifest.version > MANIFEST_VERSION:
            raise DataError(f'{path}: manifest version {manifest.version} is not supported')

        for entry in manifest.sequences:
            labels = manifest.root / entry.labels
            if not labels.is_file():
                raise DataError(f'{path}: missing label file {labels}')
            for frame_id in entry.frames:
                cloud = manifest.root / entry.velodyne / f'{frame_id:06d}.bin'
                if not cloud.is_file():
                    raise DataError(f'{path}: missing point cloud {cloud}')
        return manifest

    def load_sequence(self, entry: SequenceEntry) -> SequenceData:
        return load_sequence(self, entry)

    def __iter__(self) -> Iterator[SequenceData]:
        for entry in self.sequences:
            yield self.load_sequence(entry)


def load_sequence(manifest: DatasetManifest, entry: SequenceEntry) -> SequenceData:
    """Read the clouds and labels of one sequence of a manifest.

    Raises:
        DataError: If a label references a frame that is not listed.
    """
    clouds = {frame_id: read_kitti_velodyne(manifest.root / entry.velodyne / f'{frame_id:06d}.bin', frame_id)
              for frame_id in entry.frames}
    tracks = read_tracking_labels(manifest.root / entry.labels, manifest.class_name, entry.id)
    for track in tracks:
        for frame_id in track.frame_ids:
            if frame_id not in clouds:
                raise DataError(f'sequence {entry.id}: object {track.object_id} is labelled in '
                                f'frame {frame_id}, which has no point cloud')
    return SequenceData(entry.id, clouds, tracks, manifest.data_rate)


def write_sequence(root: Path, sequence_id: int, frames: list[LabeledFrame],
                   class_name: str = DEFAULT_CLASS) -> SequenceEntry:
    """Write a generated sequence into a dataset root."""
    velodyne = f'velodyne/{sequence_id:04d}'
    labels = f'label_02/{sequence_id:04d}.txt'
    for frame in frames:
        write_kitti_velodyne(root / velodyne / f'{frame.cloud.frame_id:06d}.bin', frame.cloud)
    write_tracking_labels(root / labels, scene_tracks(frames, sequence_id, class_name))
    return SequenceEntry(sequence_id, velodyne, labels, [frame.cloud.frame_id for frame in frames])


def generate_dataset(config: DatasetConfig, scene: SceneConfig, grid: GridSpec | None = None,
                     root: str | os.PathLike | None = None) -> dict[str, DatasetManifest]:
    """Generate synthetic train, val and test splits.

    Sequence ids are numbered across the splits, so no sequence is shared
    between them. Sequence `i` is generated from `(scene.seed, i)`.
    """
    root = Path(config.root if root is None else root)
    manifests = {}
    sequence_id = 0
    for split, count in config.split_counts().items():
        manifest = DatasetManifest(root, split, config.class_name, scene.data_rate)
        for _ in range(count):
            frames = generate_scene(scene, grid, stream=sequence_id)
            manifest.sequences.append(write_sequence(root, sequence_id, frames, config.class_name))
            logger.info('Generated sequence %d (%s) with %d frames', sequence_id, split, len(frames))
            sequence_id += 1
        manifest.save(root / f'{split}.yaml')
        manifests[split] = manifest
    return manifests
