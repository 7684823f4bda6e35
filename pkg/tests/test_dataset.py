import numpy as np
import pytest

from conftest import SMALL_GRID, SMALL_SCENE
from voxeltrack.dataset import (DatasetConfig, DatasetManifest, SceneConfig, generate_dataset, generate_scene,
                                load_sequence, read_kitti_velodyne, read_tracking_labels, sample_box_surface,
                                scene_tracks, write_kitti_velodyne, write_tracking_labels)
from voxeltrack.exceptions import ConfigError, DataError
from voxeltrack.types import Box3D, PointCloud, Track


TINY_DATASET = DatasetConfig(train_sequences=2, val_sequences=1, test_sequences=1)
TINY_SCENE = SceneConfig(objects=2, frames=3, clutter_points=20, point_density=5.0, spawn_radius=10.0)


def label_line(frame_id: int, object_id: int, class_name: str = 'Car') -> str:
    return f'{frame_id} {object_id} {class_name} 0 0 0.1 -1 -1 -1 -1 1.5 1.8 4.0 5.0 2.0 -1.0 0.3'


class TestScenes:

    def test_deterministic(self):
        first = generate_scene(SMALL_SCENE, SMALL_GRID, stream=3)
        second = generate_scene(SMALL_SCENE, SMALL_GRID, stream=3)
        for a, b in zip(first, second, strict=True):
            np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
            assert a.boxes == b.boxes

    def test_streams_differ(self):
        first = generate_scene(SMALL_SCENE, SMALL_GRID, stream=0)
        second = generate_scene(SMALL_SCENE, SMALL_GRID, stream=1)
        assert first[0].boxes != second[0].boxes

    def test_frame_layout(self):
        frames = generate_scene(SMALL_SCENE, SMALL_GRID)
        assert [frame.cloud.frame_id for frame in frames] == list(range(SMALL_SCENE.frames))
        assert all(len(frame.boxes) == SMALL_SCENE.objects for frame in frames)
        tracks = scene_tracks(frames, 4)
        assert [track.object_id for track in tracks] == [0, 1]
        assert all(len(track) == SMALL_SCENE.frames and track.track_id == 4 for track in tracks)

    def test_objects_move(self):
        frames = generate_scene(SceneConfig(objects=1, speed_range=(5.0, 5.0), frames=11, noise=0.0))
        start, end = frames[0].boxes[0], frames[10].boxes[0]
        assert np.hypot(end.x - start.x, end.y - start.y) == pytest.approx(5.0)

    def test_facing_surfaces(self):
        rng = np.random.default_rng(0)
        side = sample_box_surface(Box3D(10, 0, 0, 4, 2, 2), 10.0, rng)
        assert side.shape == (40, 3)
        np.testing.assert_allclose(side[:, 0], 8.0)

        # Below the sensor the top face is visible too
        both = sample_box_surface(Box3D(10, 0, -2, 4, 2, 2), 10.0, rng)
        assert both.shape == (120, 3)
        assert np.isclose(both[:, 2], -1.0).sum() >= 80

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SceneConfig(speed_range=(3.0, 1.0))
        with pytest.raises(ConfigError):
            SceneConfig(width_range=(0.0, 1.0))
        with pytest.raises(ConfigError):
            SceneConfig(frames=-1)


class TestVelodyne:

    def test_round_trip(self, tmp_path):
        points = np.random.default_rng(0).uniform(-10, 10, (50, 4))
        path = tmp_path / '000007.bin'
        write_kitti_velodyne(path, PointCloud(points))
        cloud = read_kitti_velodyne(path)
        assert cloud.frame_id == 7
        np.testing.assert_array_equal(cloud.points, points.astype(np.float32))
        assert path.stat().st_size == 50 * 16

    def test_bad_size(self, tmp_path):
        path = tmp_path / '000000.bin'
        path.write_bytes(b'\0' * 20)
        with pytest.raises(DataError, match='multiple of 16'):
            read_kitti_velodyne(path)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_kitti_velodyne(tmp_path / 'missing.bin')


class TestLabels:

    def test_round_trip(self, tmp_path):
        tracks = [
            Track(2, 0, ((0, Box3D(1.25, -3.5, -1, 4.1, 1.7, 1.5, 0.3)), (1, Box3D(1.5, -3.4, -1, 4.1, 1.7, 1.5, 0.31)))),
            Track(2, 5, ((1, Box3D(-7, 2, -0.9, 3.8, 1.6, 1.4, -2.9)),)),
        ]
        path = tmp_path / '0002.txt'
        write_tracking_labels(path, tracks)
        assert read_tracking_labels(path) == tracks

    def test_dimension_mapping(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text(label_line(0, 1) + '\n')
        track, = read_tracking_labels(path)
        # (h, w, l) = (1.5, 1.8, 4.0) in the file
        assert track.frames[0][1] == Box3D(5.0, 2.0, -1.0, 4.0, 1.8, 1.5, 0.3)

    def test_dont_care_and_classes(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text('\n'.join([label_line(0, 1), label_line(0, -1, 'DontCare'), label_line(0, 2, 'Pedestrian'),
                                   label_line(1, 1), '']))
        tracks = read_tracking_labels(path)
        assert [(track.object_id, len(track)) for track in tracks] == [(1, 2)]
        every_class = read_tracking_labels(path, class_name=None)
        assert [track.class_name for track in every_class] == ['Car', 'Pedestrian']

    def test_sorted_by_frame(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text('\n'.join([label_line(3, 1), label_line(1, 1), label_line(2, 1)]))
        track, = read_tracking_labels(path)
        assert track.frame_ids == [1, 2, 3]

    def test_malformed(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text(label_line(0, 1) + '\n0 1 Car 0 0\n')
        with pytest.raises(DataError, match=':2:'):
            read_tracking_labels(path)

    def test_bad_number(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text(label_line(0, 1).replace('5.0', 'five') + '\n')
        with pytest.raises(DataError, match=':1:'):
            read_tracking_labels(path)

    def test_duplicate(self, tmp_path):
        path = tmp_path / '0000.txt'
        path.write_text(label_line(0, 1) + '\n' + label_line(0, 1) + '\n')
        with pytest.raises(DataError, match='duplicate'):
            read_tracking_labels(path)


class TestDataset:

    def test_generate(self, tmp_path):
        manifests = generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        assert list(manifests) == ['train', 'val', 'test']
        ids = [entry.id for manifest in manifests.values() for entry in manifest.sequences]
        assert ids == [0, 1, 2, 3]
        for split in manifests:
            assert (tmp_path / f'{split}.yaml').is_file()

    def test_same_bytes_in_any_root(self, tmp_path):
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path / 'a')
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path / 'b')
        files = sorted(path.relative_to(tmp_path / 'a') for path in (tmp_path / 'a').rglob('*.bin'))
        assert len(files) == 4 * TINY_SCENE.frames
        for name in files:
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_manifest_round_trip(self, tmp_path):
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        manifest = DatasetManifest.load(tmp_path / 'train.yaml')
        assert manifest.split == 'train'
        assert [entry.id for entry in manifest.sequences] == [0, 1]
        sequences = list(manifest)
        assert sequences[0].frame_ids == list(range(TINY_SCENE.frames))
        assert len(sequences[1].tracks) == TINY_SCENE.objects
        assert sequences[0].data_rate == TINY_SCENE.data_rate

    def test_loaded_matches_generated(self, tmp_path):
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        sequence = next(iter(DatasetManifest.load(tmp_path / 'train.yaml')))
        frames = generate_scene(TINY_SCENE, SMALL_GRID, stream=0)
        np.testing.assert_array_equal(sequence.clouds[1].points, frames[1].cloud.points.astype(np.float32))
        assert sequence.tracks == scene_tracks(frames, 0)

    def test_missing_file(self, tmp_path):
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        (tmp_path / 'velodyne' / '0000' / '000001.bin').unlink()
        with pytest.raises(DataError, match='missing point cloud'):
            DatasetManifest.load(tmp_path / 'train.yaml')

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            DatasetManifest.load(tmp_path / 'train.yaml')

    def test_newer_version(self, tmp_path):
        generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        path = tmp_path / 'test.yaml'
        path.write_text(path.read_text().replace('version: 1', 'version: 99'))
        with pytest.raises(DataError, match='not supported'):
            DatasetManifest.load(path)

    def test_label_without_cloud(self, tmp_path):
        manifests = generate_dataset(TINY_DATASET, TINY_SCENE, SMALL_GRID, tmp_path)
        entry = manifests['val'].sequences[0]
        entry.frames.pop()
        with pytest.raises(DataError, match='no point cloud'):
            load_sequence(manifests['val'], entry)
