"""Save and load model checkpoints.

A checkpoint is a zip file with the following layout:

    version                 Integer format version as text.
    config.yaml             Grid, pillar and model settings needed to
                            rebuild the network (plain text).
    params/<name>.npy       Each parameter as little endian, in the model dtype.
    optimizer/step          Adam step counter as text.
    optimizer/m/<name>.npy  Adam first moments.
    optimizer/v/<name>.npy  Adam second moments.
    train/step              Number of completed training steps as text.

Arrays are written with `np.save(allow_pickle=False)`, so the name,
dims and dtype of every blob are stored in its own header.
"""

from __future__ import annotations

import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from uuid import uuid4

import numpy as np
import yaml

from .constants import CHECKPOINT_VERSION
from .exceptions import CheckpointError
from .nn.layers import Array
from .nn.model import ModelConfig, SiameseModel
from .nn.optim import AdamState
from .pillars import PillarConfig
from .types import GridSpec


logger = logging.getLogger(__name__)


def _write_array(zf: zipfile.ZipFile, path: str, array: Array) -> None:
    with zf.open(path, 'w') as f:
        np.save(f, np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<')), allow_pickle=False)


def _read_array(zf: zipfile.ZipFile, path: str) -> Array:
    with zf.open(path, 'r') as f:
        return np.load(f, allow_pickle=False)


@dataclass
class Checkpoint:
    """A model with the training progress that produced it."""

    model: SiameseModel
    step: int = 0
    optimizer: AdamState = field(default_factory=AdamState)

    def config_header(self) -> dict:
        pillars = asdict(self.model.pillar_config)
        grid = pillars.pop('grid')
        return {'grid': grid, 'pillars': pillars, 'model': asdict(self.model.config)}

    def _write_to_zip(self, zf: zipfile.ZipFile) -> None:
        zf.writestr('version', str(CHECKPOINT_VERSION))
        zf.writestr('config.yaml', yaml.safe_dump(self.config_header(), sort_keys=False))
        for name in self.model.parameter_names():
            _write_array(zf, f'params/{name}.npy', self.model.params[name])

        zf.writestr('optimizer/step', str(self.optimizer.step))
        for name, array in self.optimizer.m.items():
            _write_array(zf, f'optimizer/m/{name}.npy', array)
        for name, array in self.optimizer.v.items():
            _write_array(zf, f'optimizer/v/{name}.npy', array)
        zf.writestr('train/step', str(self.step))

    @classmethod
    def _load_from_zip(cls, zf: zipfile.ZipFile) -> Checkpoint:
        version = int(zf.read('version'))
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(f'checkpoint version {version} is newer than supported ({CHECKPOINT_VERSION})')

        header = yaml.safe_load(zf.read('config.yaml').decode('utf-8'))
        pillar_config = PillarConfig(grid=GridSpec(**header['grid']), **header['pillars'])
        model_config = ModelConfig(**header['model'])
        dtype = np.dtype(model_config.dtype)

        all_paths = zf.namelist()
        params = {}
        for path in all_paths:
            if path.startswith('params/') and path.endswith('.npy'):
                params[path[len('params/'):-len('.npy')]] = _read_array(zf, path).astype(dtype)
        model = SiameseModel(params, pillar_config, model_config)

        optimizer = AdamState(int(zf.read('optimizer/step')))
        for path in all_paths:
            for prefix, moments in (('optimizer/m/', optimizer.m), ('optimizer/v/', optimizer.v)):
                if path.startswith(prefix) and path.endswith('.npy'):
                    moments[path[len(prefix):-len('.npy')]] = _read_array(zf, path).astype(dtype)
        return cls(model, int(zf.read('train/step')), optimizer)

    def save(self, path: str | os.PathLike) -> None:
        """Write the checkpoint, replacing any existing file at once.

        Raises:
            OSError: If the file can't be written.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_file = path.parent / f'{uuid4().hex}.tmp'
        try:
            with zipfile.ZipFile(temp_file, mode='w', compression=zipfile.ZIP_DEFLATED) as zf:
                self._write_to_zip(zf)
            os.replace(temp_file, path)
        finally:
            if temp_file.exists():
                temp_file.unlink()
        logger.debug('Saved checkpoint at step %d to %s', self.step, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Checkpoint:
        """Read a checkpoint.

        Raises:
            CheckpointError: If the file is missing, corrupt or from a
                newer version.
        """
        try:
            with zipfile.ZipFile(path, mode='r') as zf:
                return cls._load_from_zip(zf)
        except CheckpointError:
            raise
        except (OSError, KeyError, ValueError, TypeError, zipfile.BadZipFile, yaml.YAMLError) as e:
            raise CheckpointError(f'unable to load checkpoint {path}: {e}') from e
