"""Pillar voxelization and the pillar feature encoder.

A point cloud is split into vertical pillars on a `GridSpec`, each point
is augmented to 9 features, and the encoder maps every point through a
linear layer and ReLU before taking the channelwise max per pillar. The
pooled vectors are scattered into a `PseudoImage` of shape (C, H, W),
where rows follow y and columns follow x.

Feature layout per point:
    x, y, z, intensity,
    offset to the mean of the pillar's kept points (3),
    offset to the pillar's cell centre (2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .constants import POINT_FEATURES
from .exceptions import ConfigError
from .types import GridSpec, PointCloud, Region2D
from .utils.math import rotate_points


@dataclass(frozen=True)
class PillarConfig:
    """Voxelization capacities and encoder width."""

    grid: GridSpec = field(default_factory=GridSpec)
    max_points_per_pillar: int = 32
    max_pillars: int = 12000
    feature_channels: int = 32

    def __post_init__(self) -> None:
        for name in ('max_points_per_pillar', 'max_pillars', 'feature_channels'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f'pillars.{name} must be a positive integer, got {value!r}')


class EncoderParams(NamedTuple):
    """Weights of the pointwise linear layer, (9, C) and (C,)."""

    weight: npt.NDArray[np.floating]
    bias: npt.NDArray[np.floating]


@dataclass(frozen=True, eq=False)
class PillarSet:
    """Occupied pillars with their padded point features.

    Attributes:
        indices: Grid index of each pillar as (column, row), shape (P, 2).
        features: Augmented point features, shape (P, M, 9). Rows past
            a pillar's count are zero.
        counts: Number of stored points per pillar, shape (P,).
        grid: The grid the indices refer to.
    """

    indices: npt.NDArray[np.int64]
    features: npt.NDArray[np.float64]
    counts: npt.NDArray[np.int64]
    grid: GridSpec

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def point_count(self) -> int:
        return int(self.counts.sum())

    @property
    def mask(self) -> npt.NDArray[np.bool_]:
        """Which rows of `features` hold real points."""
        return np.arange(self.features.shape[1])[None, :] < self.counts[:, None]

    @classmethod
    def empty(cls, grid: GridSpec) -> PillarSet:
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 1, POINT_FEATURES)),
                   np.zeros(0, dtype=np.int64), grid)


@dataclass(frozen=True, eq=False)
class PseudoImage:
    """Dense (C, H, W) feature grid produced from pillars."""

    values: npt.NDArray[np.floating]
    grid: GridSpec

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class EncoderCache:
    """Values kept from the encoder forward pass for the backward pass."""

    pillars: PillarSet
    features: npt.NDArray[np.floating]
    pre_activation: npt.NDArray[np.floating]
    argmax: npt.NDArray[np.int64]


def voxelize(cloud: PointCloud, cfg: PillarConfig) -> PillarSet:
    """Bin points into pillars on `cfg.grid`.

    Points outside the x/y extent (half open) or the z range (closed) are
    ignored. Each pillar keeps its first `max_points_per_pillar` points in
    input order. When there are more than `max_pillars` occupied cells,
    the ones with the most points are kept, ties going to the lower grid
    index (row major).
    """
    grid = cfg.grid
    points = cloud.points
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    inside = ((x >= grid.x_min) & (x < grid.x_max) & (y >= grid.y_min) & (y < grid.y_max)
              & (z >= grid.z_min) & (z <= grid.z_max))
    points = points[inside]
    if not len(points):
        return PillarSet.empty(grid)

    width, height = grid.width, grid.height
    columns = np.minimum(np.floor((points[:, 0] - grid.x_min) / grid.pillar_size).astype(np.int64), width - 1)
    rows = np.minimum(np.floor((points[:, 1] - grid.y_min) / grid.pillar_size).astype(np.int64), height - 1)
    keys = rows * width + columns

    # Stable sort keeps input order within each cell
    order = np.argsort(keys, kind='stable')
    sorted_keys = keys[order]
    cell_keys, starts, totals = np.unique(sorted_keys, return_index=True, return_counts=True)
    ranks = np.arange(len(sorted_keys)) - np.repeat(starts, totals)
    counts = np.minimum(totals, cfg.max_points_per_pillar)

    selected = np.arange(len(cell_keys))
    if len(cell_keys) > cfg.max_pillars:
        selected = np.sort(np.lexsort((cell_keys, -counts))[:cfg.max_pillars])
    remap = np.full(len(cell_keys), -1, dtype=np.int64)
    remap[selected] = np.arange(len(selected))

    groups = remap[np.repeat(np.arange(len(cell_keys)), totals)]
    keep = (ranks < cfg.max_points_per_pillar) & (groups >= 0)
    groups, ranks = groups[keep], ranks[keep]
    kept_points = points[order][keep]

    counts = counts[selected]
    cell_keys = cell_keys[selected]
    indices = np.stack([cell_keys % width, cell_keys // width], axis=1)

    capacity = int(counts.max())
    raw = np.zeros((len(selected), capacity, 4), dtype=np.float64)
    raw[groups, ranks] = kept_points
    mask = np.arange(capacity)[None, :] < counts[:, None]

    mean = raw[:, :, :3].sum(axis=1) / counts[:, None]
    centres = np.stack([grid.x_min + (indices[:, 0] + 0.5) * grid.pillar_size,
                        grid.y_min + (indices[:, 1] + 0.5) * grid.pillar_size], axis=1)

    features = np.empty((len(selected), capacity, POINT_FEATURES), dtype=np.float64)
    features[:, :, 0:4] = raw
    features[:, :, 4:7] = raw[:, :, :3] - mean[:, None, :]
    features[:, :, 7:9] = raw[:, :, :2] - centres[:, None, :]
    features[~mask] = 0.0
    return PillarSet(indices, features, counts, grid)


def validate_encoder(weights: EncoderParams) -> None:
    weight, bias = weights
    if weight.ndim != 2 or weight.shape[0] != POINT_FEATURES:
        raise ConfigError(f'encoder weight must have shape ({POINT_FEATURES}, C), got {weight.shape}')
    if bias.shape != (weight.shape[1],):
        raise ConfigError(f'encoder bias must have shape ({weight.shape[1]},), got {bias.shape}')


def encode_pillars_forward(pillars: PillarSet, weights: EncoderParams) -> tuple[PseudoImage, EncoderCache]:
    """Encode pillars and keep what the backward pass needs."""
    validate_encoder(weights)
    weight, bias = weights
    channels = weight.shape[1]
    image = np.zeros((channels, pillars.grid.height, pillars.grid.width), dtype=weight.dtype)

    features = pillars.features.astype(weight.dtype, copy=False)
    pre_activation = features @ weight + bias
    activation = np.maximum(pre_activation, 0) * pillars.mask[:, :, None]
    if len(pillars):
        argmax = activation.argmax(axis=1)
        pooled = np.take_along_axis(activation, argmax[:, None, :], axis=1)[:, 0, :]
        image[:, pillars.indices[:, 1], pillars.indices[:, 0]] = pooled.T
    else:
        argmax = np.zeros((0, channels), dtype=np.int64)
    return PseudoImage(image, pillars.grid), EncoderCache(pillars, features, pre_activation, argmax)


def encode_pillars(pillars: PillarSet, weights: EncoderParams) -> PseudoImage:
    """Run the pointwise encoder and scatter the pooled pillars into an image.

    Raises:
        ConfigError: If the weights are not shaped (9, C) and (C,).
    """
    return encode_pillars_forward(pillars, weights)[0]


def encode_pillars_backward(grad: npt.NDArray[np.floating], cache: EncoderCache) -> EncoderParams:
    """Get the encoder weight gradients for an upstream image gradient.

    The max over points routes each pillar's gradient to the point that
    won the pooling for that channel.
    """
    pillars = cache.pillars
    channels = cache.pre_activation.shape[2]
    if not len(pillars):
        return EncoderParams(np.zeros((POINT_FEATURES, channels), dtype=grad.dtype),
                             np.zeros(channels, dtype=grad.dtype))

    grad_pooled = grad[:, pillars.indices[:, 1], pillars.indices[:, 0]].T
    rows = np.arange(len(pillars))[:, None]
    winner_pre = cache.pre_activation[rows, cache.argmax, np.arange(channels)[None, :]]
    winner_real = cache.argmax < pillars.counts[:, None]
    grad_pre = grad_pooled * ((winner_pre > 0) & winner_real)

    winner_features = cache.features[rows, cache.argmax]
    grad_weight = np.einsum('pci,pc->ic', winner_features, grad_pre)
    return EncoderParams(grad_weight, grad_pre.sum(axis=0))


def region_grid(region: Region2D, grid: GridSpec) -> GridSpec:
    """Get the region aligned grid, centred on 0, of ceil(w) x ceil(h) pillars."""
    columns = math.ceil(region.w - 1e-9)
    rows = math.ceil(region.h - 1e-9)
    half_w = columns * grid.pillar_size / 2
    half_h = rows * grid.pillar_size / 2
    return GridSpec(-half_w, half_w, -half_h, half_h, grid.pillar_size, grid.z_min, grid.z_max)


def region_pillars(cloud: PointCloud, region: Region2D, cfg: PillarConfig) -> PillarSet:
    """Voxelize the points of a rotated region in the region's own frame.

    Points are rotated by `-region.alpha` about the region centre, so the
    output only depends on the region size and not its angle.
    """
    grid = cfg.grid
    cx, cy = grid.to_meters(region.x, region.y)
    local = cloud.points.copy()
    local[:, :2] = rotate_points(local[:, :2], -region.alpha, origin=(cx, cy)) - (cx, cy)
    return voxelize(PointCloud(local, cloud.frame_id), replace(cfg, grid=region_grid(region, grid)))


def region_pseudo_image(cloud: PointCloud, region: Region2D, grid: GridSpec,
                        weights: EncoderParams, cfg: PillarConfig) -> PseudoImage:
    """Create the pseudo image of a region.

    The output is (C, ceil(h), ceil(w)) regardless of the angle, and is all
    zeros when no points fall inside.
    """
    if cfg.grid != grid:
        cfg = replace(cfg, grid=grid)
    return encode_pillars(region_pillars(cloud, region, cfg), weights)
