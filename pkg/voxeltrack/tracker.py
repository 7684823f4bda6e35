"""Single object tracking with a multi-rotation Siamese search.

Each frame, a search region is placed at the linearly extrapolated target
centre and rotated by a few fixed steps. The rotation with the best
(penalised) correlation peak wins, its score map is upscaled and blended
with a penalty window, and the peak offset moves the target. Target
features are slowly merged with the features at the new position.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import numpy.typing as npt
from scipy.signal.windows import hann

from .constants import TAU
from .enums import PenaltyKind
from .exceptions import ConfigError, ShapeError
from .geometry import box_to_region
from .nn.layers import Array
from .nn.model import SiameseModel
from .nn.resize import bicubic_resize
from .pillars import PillarSet, region_pillars
from .types import Box3D, GridSpec, PointCloud, Region2D
from .utils.math import rotation_matrix


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    """Inference hyperparameters.

    `sigma_plus` and `sigma_minus` are fractions of the upscaled score
    map size. `penalty_kind` of None picks the directional Gaussian when
    extrapolation is enabled, otherwise the Hann window. `normalize_scores`
    rescales the upscaled scores to [0, 1] before the penalty blend.
    """

    context_amount: float = 0.27
    search_scale: float = 2.0
    rotations_count: int = 3
    rotation_step: float = 0.15
    rotation_penalty: float = 0.98
    rotation_interpolation: float = 1.0
    window_influence: float = 0.85
    score_upscale: int = 8
    normalize_scores: bool = True
    target_interp_size: int = 0
    search_interp_size: int = 0
    offset_interpolation: float = 0.3
    feature_merge_scale: float = 0.005
    extrapolation_enabled: bool = True
    penalty_kind: str | None = None
    sigma_plus: float = 0.25
    sigma_minus: float = 0.15
    hash_sectors: int = 16
    keep_maps: bool = False

    def __post_init__(self) -> None:
        if not -1 < self.context_amount < 1:
            raise ConfigError(f'tracker.context_amount must be in (-1, 1), got {self.context_amount}')
        if self.search_scale <= 1:
            raise ConfigError(f'tracker.search_scale must be greater than 1, got {self.search_scale}')
        if self.rotations_count < 1 or self.rotations_count % 2 == 0:
            raise ConfigError(f'tracker.rotations_count must be a positive odd number, got {self.rotations_count}')
        for name in ('rotation_penalty', 'rotation_interpolation', 'window_influence',
                     'offset_interpolation', 'feature_merge_scale'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f'tracker.{name} must be in [0, 1], got {value}')
        if self.score_upscale < 1:
            raise ConfigError(f'tracker.score_upscale must be at least 1, got {self.score_upscale}')
        if self.target_interp_size < 0 or self.search_interp_size < 0:
            raise ConfigError('tracker interpolation sizes must not be negative')
        if self.sigma_plus <= 0 or self.sigma_minus <= 0:
            raise ConfigError('tracker.sigma_plus and tracker.sigma_minus must be positive')
        if self.hash_sectors < 1:
            raise ConfigError(f'tracker.hash_sectors must be at least 1, got {self.hash_sectors}')
        if self.penalty_kind is not None:
            try:
                PenaltyKind(self.penalty_kind)
            except ValueError:
                valid = ', '.join(kind.value for kind in PenaltyKind)
                raise ConfigError(f'tracker.penalty_kind must be one of {valid}, got {self.penalty_kind!r}') from None

    @property
    def rotation_range(self) -> int:
        """Number of rotations on each side of the centre one."""
        return self.rotations_count // 2

    @property
    def resolved_penalty_kind(self) -> PenaltyKind:
        if self.penalty_kind is not None:
            return PenaltyKind(self.penalty_kind)
        if self.extrapolation_enabled:
            return PenaltyKind.Gaussian
        return PenaltyKind.Hann


@dataclass(frozen=True, eq=False)
class PenaltyMap:
    """Window blended into the upscaled score map, peaking at 1."""

    values: npt.NDArray[np.float64]
    kind: PenaltyKind
    precision: npt.NDArray[np.float64] | None = None
    sector: int | None = None


PenaltyCache = dict[tuple[tuple[int, int], PenaltyKind, int | None], PenaltyMap]


class RotationChoice(NamedTuple):
    """The winning search rotation."""

    index: int
    region: Region2D
    alpha: float
    score_map: Array


@dataclass(frozen=True)
class TrackRecord:
    """Output of the tracker for one frame."""

    frame_id: int
    box: Box3D
    score: float = 0.0
    rotation_index: int = 0
    elapsed_ns: int = 0
    clamped: bool = False
    score_map: npt.NDArray[np.float64] | None = field(default=None, compare=False, repr=False)
    penalty_map: npt.NDArray[np.float64] | None = field(default=None, compare=False, repr=False)


@dataclass
class TrackerState:
    """Everything carried from one frame to the next.

    `target_region` includes context, while `object_box` keeps the size,
    height and vertical extent of the initial box for reporting.
    """

    target_region: Region2D
    object_box: Box3D
    target_features: Array
    previous_center: tuple[float, float]
    penalty_cache: PenaltyCache = field(default_factory=dict)
    frame_count: int = 0


def add_context(region: Region2D, context: float) -> Region2D:
    """Enlarge a target region with surrounding context.

    A positive amount makes a square of side sqrt((w + m)(h + m)) with
    m = c(w + h), otherwise both sides are scaled by (1 - c).

    >>> add_context(Region2D(0, 0, 10, 10, 0), 0.5).size
    (20.0, 20.0)
    >>> [round(side, 9) for side in add_context(Region2D(0, 0, 10, 20, 0), -0.1).size]
    [11.0, 22.0]
    """
    if context > 0:
        margin = context * (region.w + region.h)
        side = math.sqrt((region.w + margin) * (region.h + margin))
        return region.with_size(side, side)
    return region.with_size(region.w * (1 - context), region.h * (1 - context))


def make_search(region: Region2D, search_scale: float) -> Region2D:
    """Scale the sides of a region, keeping its centre and angle."""
    return region.with_size(region.w * search_scale, region.h * search_scale)


def extrapolate_center(current: tuple[float, float], previous: tuple[float, float]) -> tuple[float, float]:
    """Continue the last motion for one more frame.

    >>> extrapolate_center((3.0, 5.0), (1.0, 4.0))
    (5.0, 6.0)
    """
    return 2 * current[0] - previous[0], 2 * current[1] - previous[1]


def interpolate_center(previous: tuple[float, float], predicted: tuple[float, float],
                       offset_interpolation: float) -> tuple[float, float]:
    """Blend the previous centre with the new prediction.

    >>> [round(v, 9) for v in interpolate_center((10.0, 10.0), (20.0, 20.0), 0.3)]
    [17.0, 17.0]
    """
    w = offset_interpolation
    return w * previous[0] + (1 - w) * predicted[0], w * previous[1] + (1 - w) * predicted[1]


def extract_features(cloud: PointCloud, region: Region2D, model: SiameseModel, interp_size: int = 0,
                     pillars: PillarSet | None = None) -> Array:
    """Get the FGN features of a region.

    Raises:
        ShapeError: If the region is smaller than the receptive field.
    """
    return model.embed(cloud, region, interp_size, pillars)


def rotated_search_set(search: Region2D, rotation_range: int, rotation_step: float) -> list[Region2D]:
    """Get the search regions at angles `alpha + i * step` for i in [-K, K].

    The list is ordered by i, so the unrotated region is at index K.
    """
    if rotation_range < 0:
        raise ConfigError(f'rotation range must not be negative, got {rotation_range}')
    return [search.with_alpha(search.alpha + i * rotation_step) for i in range(-rotation_range, rotation_range + 1)]


def select_rotation(score_maps: Sequence[Array], search_set: Sequence[Region2D], rotation_penalty: float,
                    rotation_interpolation: float, previous_alpha: float) -> RotationChoice:
    """Pick the rotation with the highest penalised peak.

    Every rotation other than the centre one has its peak multiplied by
    `rotation_penalty`. Ties go to the centre, then to the smaller
    rotation offset.
    """
    if not search_set or len(score_maps) != len(search_set):
        raise ShapeError(f'expected one score map per search region, got {len(score_maps)} and {len(search_set)}')
    rotation_range = len(search_set) // 2

    best = None
    best_value = -math.inf
    for i in sorted(range(-rotation_range, rotation_range + 1), key=lambda i: (abs(i), i)):
        value = float(np.max(score_maps[i + rotation_range]))
        if i:
            value *= rotation_penalty
        if value > best_value:
            best, best_value = i, value
    assert best is not None

    region = search_set[best + rotation_range]
    alpha = rotation_interpolation * region.alpha + (1 - rotation_interpolation) * previous_alpha
    return RotationChoice(best, region, alpha, score_maps[best + rotation_range])


def rotation_sector(phi: float, sectors: int) -> int:
    """Hash an angle into one of `sectors` equal sectors.

    >>> rotation_sector(math.pi, 8)
    4
    >>> rotation_sector(-0.1, 4)
    3
    """
    phi = phi % TAU
    return min(int(math.floor(sectors * phi / TAU)), sectors - 1)


def _hann_window(size: tuple[int, int]) -> npt.NDArray[np.float64]:
    # Padded so the edge samples are not zero
    rows = hann(size[0] + 2, sym=True)[1:-1]
    columns = hann(size[1] + 2, sym=True)[1:-1]
    window = np.outer(rows, columns)
    return window / window.max()


def _gaussian_window(size: tuple[int, int], precision: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    rows, columns = size
    y, x = np.mgrid[0:rows, 0:columns].astype(np.float64)
    offsets = np.stack([x - (columns - 1) / 2, y - (rows - 1) / 2], axis=-1)
    exponent = np.einsum('...i,ij,...j->...', offsets, precision, offsets)
    window = np.exp(-0.5 * exponent)
    return window / window.max()


def penalty_map(kind: PenaltyKind, size: tuple[int, int], extrapolation: tuple[float, float] = (0.0, 0.0),
                sigma_plus: float = 0.25, sigma_minus: float = 0.15, sectors: int = 16,
                cache: PenaltyCache | None = None) -> PenaltyMap:
    """Build or fetch the penalty window for an upscaled score map.

    The Hann window is the outer product of two 1D windows. The
    directional Gaussian is stretched along the extrapolation vector
    (given in the search region's frame). Its angle is snapped to the
    centre of its hash sector, so every vector within a sector shares
    one cached map. A zero vector falls back to the Hann window.

    `sigma_plus` and `sigma_minus` are spreads in pixels given as a
    fraction of the mean map side.
    """
    ex, ey = extrapolation
    if kind is PenaltyKind.Gaussian and math.hypot(ex, ey) < 1e-9:
        kind = PenaltyKind.Hann

    sector = rotation_sector(math.atan2(ey, ex), sectors) if kind is PenaltyKind.Gaussian else None
    key = (size, kind, sector)
    if cache is not None and key in cache:
        return cache[key]

    match kind:
        case PenaltyKind.Hann:
            result = PenaltyMap(_hann_window(size), kind)
        case PenaltyKind.Gaussian:
            assert sector is not None
            phi = (sector + 0.5) * TAU / sectors
            scale = (size[0] + size[1]) / 2
            spread_along = sigma_plus * scale
            spread_across = sigma_minus * scale
            rotation = rotation_matrix(phi)
            precision = rotation @ np.diag([1 / spread_along ** 2, 1 / spread_across ** 2]) @ rotation.T
            result = PenaltyMap(_gaussian_window(size, precision), kind, precision, sector)

    result.values.flags.writeable = False
    if cache is not None:
        cache[key] = result
    return result


def upscaled_size(shape: tuple[int, ...], score_upscale: int) -> tuple[int, int]:
    """Get the size of an upscaled score map.

    Each side becomes `u * (n - 1) + 1`, so an odd map stays odd and its
    centre pixel lands on the centre pixel of the result.

    >>> upscaled_size((19, 19), 8)
    (145, 145)
    >>> upscaled_size((1, 4), 3)
    (1, 10)
    """
    return score_upscale * (shape[0] - 1) + 1, score_upscale * (shape[1] - 1) + 1


def postprocess_scores(raw: Array, score_upscale: int, window_influence: float, penalty: PenaltyMap,
                       normalize: bool = True) -> tuple[npt.NDArray[np.float64], tuple[int, int]]:
    """Upscale a score map and blend it with the penalty window.

    With `normalize`, the upscaled map is rescaled to [0, 1] before the
    blend, otherwise the raw scores are blended as they are. Ties in the
    blended map go to the smaller row, then column.

    Returns:
        The blended map and the (row, column) of its peak.
    """
    size = upscaled_size(raw.shape, score_upscale)
    if penalty.values.shape != size:
        raise ShapeError(f'penalty map {penalty.values.shape} does not match the upscaled score map {size}')

    upscaled = bicubic_resize(np.asarray(raw, dtype=np.float64), size)
    if normalize:
        low, high = upscaled.min(), upscaled.max()
        if high > low:
            upscaled = (upscaled - low) / (high - low)
        else:
            upscaled = np.zeros_like(upscaled)

    blended = window_influence * penalty.values + (1 - window_influence) * upscaled
    row, column = np.unravel_index(int(np.argmax(blended)), blended.shape)
    return blended, (int(row), int(column))


def decode_offset(peak: tuple[int, int], size: tuple[int, int], search: Region2D) -> tuple[float, float]:
    """Convert a peak in the upscaled map to a centre offset in grid pixels.

    The offset is measured from the map centre, scaled by the search
    region size over the map size, then rotated by the search angle.
    """
    row, column = peak
    rows, columns = size
    local = np.array([(column - (columns - 1) / 2) * search.w / columns,
                      (row - (rows - 1) / 2) * search.h / rows])
    dx, dy = rotation_matrix(search.alpha) @ local
    return float(dx), float(dy)


def merge_features(old: Array, new: Array, merge_scale: float) -> Array:
    """Blend the stored target features towards new ones."""
    if merge_scale == 0:
        return old
    if merge_scale == 1:
        return new
    return (1 - merge_scale) * old + merge_scale * new


def _clamp_search(center: tuple[float, float], search: Region2D, grid: GridSpec) -> tuple[tuple[float, float], bool]:
    corners = search.with_center(*center).corners()
    x_lo, y_lo = corners.min(axis=0)
    x_hi, y_hi = corners.max(axis=0)
    if x_hi >= 0 and y_hi >= 0 and x_lo <= grid.width and y_lo <= grid.height:
        return center, False
    return (min(max(center[0], 0.0), float(grid.width)), min(max(center[1], 0.0), float(grid.height))), True


def init(cloud: PointCloud, box: Box3D, model: SiameseModel, config: TrackerConfig) -> TrackerState:
    """Create the tracker state from the first frame and its box.

    Raises:
        OutOfRangeError: If the box is outside the grid.
    """
    grid = model.pillar_config.grid
    target = add_context(box_to_region(box, grid), config.context_amount)
    pillars = region_pillars(cloud, target, model.pillar_config)
    features = extract_features(cloud, target, model, config.target_interp_size, pillars)
    if not pillars.point_count:
        logger.warning('No points inside the initial target region of frame %d, using empty features',
                       cloud.frame_id)
        features = np.zeros_like(features)
    return TrackerState(target, box, features, target.center)


def step(state: TrackerState, cloud: PointCloud, model: SiameseModel,
         config: TrackerConfig) -> tuple[TrackerState, TrackRecord]:
    """Track the object into a new frame."""
    grid = model.pillar_config.grid
    target = state.target_region
    current = target.center

    if config.extrapolation_enabled:
        search_center = extrapolate_center(current, state.previous_center)
    else:
        search_center = current
    extrapolation = (current[0] - state.previous_center[0], current[1] - state.previous_center[1])

    search = make_search(target, config.search_scale)
    search_center, clamped = _clamp_search(search_center, search, grid)
    if clamped:
        logger.warning('Search region of frame %d is outside the grid, clamping its centre', cloud.frame_id)
    search = search.with_center(*search_center)

    search_set = rotated_search_set(search, config.rotation_range, config.rotation_step)
    score_maps = [model.correlate(extract_features(cloud, region, model, config.search_interp_size),
                                  state.target_features) for region in search_set]
    choice = select_rotation(score_maps, search_set, config.rotation_penalty,
                             config.rotation_interpolation, target.alpha)

    # Extrapolation vector in the chosen search frame
    local_extrapolation = rotation_matrix(-choice.region.alpha) @ np.array(extrapolation)
    size = upscaled_size(choice.score_map.shape, config.score_upscale)
    penalty = penalty_map(config.resolved_penalty_kind, size, (local_extrapolation[0], local_extrapolation[1]),
                          config.sigma_plus, config.sigma_minus, config.hash_sectors, state.penalty_cache)
    blended, peak = postprocess_scores(choice.score_map, config.score_upscale, config.window_influence, penalty,
                                       config.normalize_scores)
    offset = decode_offset(peak, size, choice.region)

    predicted = (search_center[0] + offset[0], search_center[1] + offset[1])
    center = interpolate_center(current, predicted, config.offset_interpolation)
    new_target = Region2D(center[0], center[1], target.w, target.h, choice.alpha)

    features = state.target_features
    if config.feature_merge_scale > 0:
        latest = extract_features(cloud, new_target, model, config.target_interp_size)
        features = merge_features(features, latest, config.feature_merge_scale)

    box = state.object_box
    x, y = grid.to_meters(*center)
    record = TrackRecord(
        frame_id=cloud.frame_id,
        box=replace(box, x=x, y=y, alpha=choice.alpha),
        score=float(np.max(choice.score_map)),
        rotation_index=choice.index,
        clamped=clamped,
        score_map=blended if config.keep_maps else None,
        penalty_map=np.array(penalty.values) if config.keep_maps else None,
    )
    new_state = replace(state, target_region=new_target, target_features=features,
                        previous_center=current, frame_count=state.frame_count + 1)
    return new_state, record


class Tracker:
    """Stateful tracker for one sequence.

    Follows the streaming protocol: `init` with the first cloud and its
    ground truth box, then `track` every following cloud.
    """

    def __init__(self, model: SiameseModel, config: TrackerConfig | None = None) -> None:
        self.model = model
        self.config = config or TrackerConfig()
        self.state: TrackerState | None = None
        self.last_record: TrackRecord | None = None

    def init(self, cloud: PointCloud, box: Box3D) -> TrackRecord:
        start = time.perf_counter_ns()
        self.state = init(cloud, box, self.model, self.config)
        self.last_record = TrackRecord(cloud.frame_id, box, elapsed_ns=time.perf_counter_ns() - start)
        return self.last_record

    def step(self, cloud: PointCloud) -> TrackRecord:
        """Track into a new frame and time the full update."""
        if self.state is None:
            raise RuntimeError('tracker must be initialised before tracking')
        start = time.perf_counter_ns()
        self.state, record = step(self.state, cloud, self.model, self.config)
        self.last_record = replace(record, elapsed_ns=time.perf_counter_ns() - start)
        return self.last_record

    def track(self, cloud: PointCloud) -> Box3D:
        return self.step(cloud).box
