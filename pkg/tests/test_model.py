import zipfile

import numpy as np
import pytest

from voxeltrack.checkpoint import Checkpoint
from voxeltrack.exceptions import BackwardError, CheckpointError, ConfigError
from voxeltrack.nn.loss import LossSpec, weighted_bce
from voxeltrack.nn.model import ModelConfig, SiameseModel
from voxeltrack.nn.optim import Adam
from voxeltrack.pillars import PillarConfig
from voxeltrack.types import GridSpec, PointCloud, Region2D


GRID = GridSpec(-4, 4, -4, 4, pillar_size=0.5)
PILLARS = PillarConfig(GRID, max_points_per_pillar=8, feature_channels=4)
TARGET = Region2D(8, 8, 7, 7, 0.2)
SEARCH = Region2D(8.4, 7.7, 11, 11, 0.2)


def small_model(dtype: str = 'float64', seed: int = 0) -> SiameseModel:
    config = ModelConfig(fgn_layers_per_block=2, fgn_channels=4, head_scale=0.5, dtype=dtype)
    model = SiameseModel.initialize(PILLARS, config, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, param in model.params.items():
        if name.endswith('.bias') and name != 'head.bias':
            param[:] = rng.uniform(0.05, 0.2, param.shape)
    return model


def random_cloud(seed: int, count: int = 120) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(np.column_stack([rng.uniform(-2.5, 2.5, count), rng.uniform(-2.5, 2.5, count),
                                       rng.uniform(-2, 0.5, count), rng.uniform(0, 1, count)]))


class TestSiameseModel:

    def test_output_dims(self):
        model = small_model()
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH)
        # 7 -> 5 -> 3 and 11 -> 9 -> 7 pillars
        assert logits.shape == (5, 5)

    def test_interpolated_dims(self):
        model = small_model()
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH,
                                    target_interp=9, search_interp=15)
        assert logits.shape == (7, 7)

    def test_shared_weights(self):
        model = small_model()
        cloud = random_cloud(2)
        first = model.embed(cloud, TARGET)
        second = model.embed(cloud, TARGET)
        np.testing.assert_array_equal(first, second)

    def test_empty_regions_give_bias(self):
        config = ModelConfig(fgn_layers_per_block=2, fgn_channels=4, dtype='float64')
        model = SiameseModel.initialize(PILLARS, config)
        model.params['head.bias'][0] = -0.25
        logits = model.forward_pair(PointCloud.empty(), TARGET, PointCloud.empty(), SEARCH)
        np.testing.assert_array_equal(logits, -0.25)

    def test_backward_before_forward(self):
        with pytest.raises(BackwardError):
            small_model().backward(np.zeros((5, 5)))

    def test_backward_consumes_tape(self):
        model = small_model()
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH)
        model.backward(np.ones_like(logits))
        with pytest.raises(BackwardError):
            model.backward(np.ones_like(logits))

    def test_zero_upstream(self):
        model = small_model()
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH)
        grads = model.backward(np.zeros_like(logits))
        assert set(grads) == set(model.parameter_names())
        for grad in grads.values():
            assert not grad.any()

    @pytest.mark.parametrize('interp', [(0, 0), (9, 15)])
    def test_gradients_match_finite_differences(self, interp):
        model = small_model()
        target_cloud, search_cloud = random_cloud(3), random_cloud(4)
        upstream = np.random.default_rng(5).standard_normal(
            model.forward_pair(target_cloud, TARGET, search_cloud, SEARCH, *interp).shape)
        grads = model.backward(upstream)

        def loss():
            return float(np.sum(upstream * model.forward_pair(target_cloud, TARGET, search_cloud, SEARCH, *interp)))

        h = 1e-5
        for name in model.parameter_names():
            param = model.params[name]
            numeric = np.zeros_like(param)
            for index in np.ndindex(param.shape):
                original = param[index]
                param[index] = original + h
                plus = loss()
                param[index] = original - h
                minus = loss()
                param[index] = original
                numeric[index] = (plus - minus) / (2 * h)
            scale = max(np.linalg.norm(numeric), np.linalg.norm(grads[name]), 1e-12)
            assert np.linalg.norm(numeric - grads[name]) / scale < 1e-3, name

    def test_training_reduces_loss(self):
        model = small_model()
        target_cloud, search_cloud = random_cloud(6), random_cloud(7)
        labels = np.zeros((5, 5))
        labels[2, 2] = 1
        spec = LossSpec(labels, np.ones((5, 5)))
        optimizer = Adam(model.params, lr=1e-2)

        losses = []
        for _ in range(30):
            loss, grad = weighted_bce(model.forward_pair(target_cloud, TARGET, search_cloud, SEARCH), spec)
            losses.append(loss)
            optimizer.step(model.backward(grad))
        assert losses[-1] < losses[0]

    def test_copy_is_independent(self):
        model = small_model()
        clone = model.copy()
        clone.params['head.scale'][0] = 10
        assert model.params['head.scale'][0] == 0.5

    def test_layout_mismatch(self):
        model = small_model()
        params = dict(model.params)
        del params['fgn.1.bias']
        with pytest.raises(ConfigError, match='fgn.1.bias'):
            SiameseModel(params, PILLARS, model.config)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(dtype='float16')
        with pytest.raises(ConfigError):
            ModelConfig(fgn_channels=0)


class TestCheckpoint:

    def test_round_trip(self, tmp_path):
        model = small_model('float32')
        optimizer = Adam(model.params, lr=1e-3)
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH)
        optimizer.step(model.backward(np.ones_like(logits)))

        path = tmp_path / 'model.vtc'
        Checkpoint(model, 17, optimizer.state).save(path)
        loaded = Checkpoint.load(path)

        assert loaded.step == 17
        assert loaded.optimizer.step == 1
        assert loaded.model.config == model.config
        assert loaded.model.pillar_config == model.pillar_config
        for name in model.parameter_names():
            np.testing.assert_array_equal(loaded.model.params[name], model.params[name])
            np.testing.assert_array_equal(loaded.optimizer.m[name], optimizer.state.m[name])
            np.testing.assert_array_equal(loaded.optimizer.v[name], optimizer.state.v[name])

    def test_float64_resumes_exactly(self, tmp_path):
        model = small_model('float64')
        optimizer = Adam(model.params, lr=1e-3)
        logits = model.forward_pair(random_cloud(0), TARGET, random_cloud(1), SEARCH)
        optimizer.step(model.backward(np.ones_like(logits)))

        path = tmp_path / 'model.vtc'
        Checkpoint(model, 1, optimizer.state).save(path)
        loaded = Checkpoint.load(path)
        with zipfile.ZipFile(path) as zf:
            assert all(np.load(zf.open(name)).dtype == np.float64
                       for name in zf.namelist() if name.endswith('.npy'))

        resumed = Adam(loaded.model.params, lr=1e-3)
        resumed.state = loaded.optimizer
        cloud = random_cloud(2)
        for current, adam in ((model, optimizer), (loaded.model, resumed)):
            logits = current.forward_pair(cloud, TARGET, cloud, SEARCH)
            adam.step(current.backward(np.ones_like(logits)))
        for name in model.parameter_names():
            assert loaded.model.params[name].dtype == np.float64
            np.testing.assert_array_equal(loaded.model.params[name], model.params[name])

    def test_same_predictions(self, tmp_path):
        model = small_model('float32')
        path = tmp_path / 'model.vtc'
        Checkpoint(model).save(path)
        loaded = Checkpoint.load(path).model
        cloud = random_cloud(8)
        np.testing.assert_array_equal(loaded.forward_pair(cloud, TARGET, cloud, SEARCH),
                                      model.forward_pair(cloud, TARGET, cloud, SEARCH))

    def test_overwrite_leaves_no_temp_files(self, tmp_path):
        model = small_model('float32')
        path = tmp_path / 'model.vtc'
        Checkpoint(model, 1).save(path)
        Checkpoint(model, 2).save(path)
        assert [p.name for p in tmp_path.iterdir()] == ['model.vtc']
        assert Checkpoint.load(path).step == 2

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / 'missing.vtc')

    def test_corrupt(self, tmp_path):
        path = tmp_path / 'model.vtc'
        path.write_bytes(b'not a zip file')
        with pytest.raises(CheckpointError):
            Checkpoint.load(path)

    def test_newer_version(self, tmp_path):
        path = tmp_path / 'model.vtc'
        Checkpoint(small_model('float32')).save(path)
        with zipfile.ZipFile(path) as zf:
            entries = {name: zf.read(name) for name in zf.namelist()}
        entries['version'] = b'999'
        with zipfile.ZipFile(path, 'w') as zf:
            for name, data in entries.items():
                zf.writestr(name, data)
        with pytest.raises(CheckpointError, match='newer'):
            Checkpoint.load(path)
