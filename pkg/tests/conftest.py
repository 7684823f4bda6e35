import pytest

from voxeltrack.dataset import SceneConfig, SequenceData, generate_scene, scene_tracks
from voxeltrack.nn.model import ModelConfig, SiameseModel
from voxeltrack.pillars import PillarConfig
from voxeltrack.types import GridSpec


SMALL_GRID = GridSpec(-20, 20, -20, 20, pillar_size=0.5)
SMALL_PILLARS = PillarConfig(SMALL_GRID, max_points_per_pillar=16, max_pillars=4000, feature_channels=4)
SMALL_MODEL = ModelConfig(fgn_layers_per_block=2, fgn_channels=4, head_scale=0.1)
SMALL_SCENE = SceneConfig(objects=2, speed_range=(0.5, 2.0), frames=6, spawn_radius=12.0, clutter_points=50,
                          point_density=10.0)


def small_sequence(sequence_id: int = 0, scene: SceneConfig = SMALL_SCENE) -> SequenceData:
    frames = generate_scene(scene, SMALL_GRID, stream=sequence_id)
    return SequenceData(sequence_id, {frame.cloud.frame_id: frame.cloud for frame in frames},
                        scene_tracks(frames, sequence_id), scene.data_rate)


@pytest.fixture
def grid() -> GridSpec:
    return SMALL_GRID


@pytest.fixture
def model() -> SiameseModel:
    return SiameseModel.initialize(SMALL_PILLARS, SMALL_MODEL)


@pytest.fixture
def sequence() -> SequenceData:
    return small_sequence()
