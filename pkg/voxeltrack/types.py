"""Geometric value types shared by every part of the tracker.

All types are immutable. Angles are counter-clockwise positive with 0
along +x of the grid, and `Box3D.w` is the length along the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, Iterator, NamedTuple

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import numpy.typing as npt

from .constants import DEFAULT_CLASS
from .exceptions import ConfigError, InvalidGeometryError
from .utils.math import normalize_angle, rotate_points, rotated_rect_corners


def _check_finite(obj: object) -> None:
    for field in fields(obj):  # type: ignore[arg-type]
        value = getattr(obj, field.name)
        if isinstance(value, float) and not math.isfinite(value):
            raise InvalidGeometryError(f'{type(obj).__name__}.{field.name} must be finite, got {value}')


def _coerce_floats(obj: object, *names: str) -> None:
    for name in names:
        try:
            object.__setattr__(obj, name, float(getattr(obj, name)))
        except (TypeError, ValueError):
            raise InvalidGeometryError(f'{type(obj).__name__}.{name} must be a number') from None


class Point3D(NamedTuple):
    """A single Lidar return."""

    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Store a frame of Lidar points as an (N, 4) array.

    The columns are x, y, z and intensity. The array is copied and made
    read only, so clouds can be shared between workers.

    >>> cloud = PointCloud.from_points([Point3D(1, 2, 3, 0.5)], frame_id=4)
    >>> len(cloud)
    1
    >>> next(iter(cloud))
    Point3D(x=1.0, y=2.0, z=3.0, intensity=0.5)
    >>> len(PointCloud.empty())
    0
    """

    points: npt.NDArray[np.float64]
    frame_id: int = 0

    def __post_init__(self) -> None:
        array = np.array(self.points, dtype=np.float64)
        if array.size == 0:
            array = array.reshape(0, 4)
        if array.ndim != 2 or array.shape[1] != 4:
            raise InvalidGeometryError(f'point array must have shape (N, 4), got {array.shape}')
        if not np.all(np.isfinite(array)):
            raise InvalidGeometryError('point coordinates must be finite')
        array.flags.writeable = False
        object.__setattr__(self, 'points', array)
        object.__setattr__(self, 'frame_id', int(self.frame_id))

    @classmethod
    def empty(cls, frame_id: int = 0) -> Self:
        """Create a cloud with no points."""
        return cls(np.zeros((0, 4), dtype=np.float64), frame_id)

    @classmethod
    def from_points(cls, points: Iterable[Point3D], frame_id: int = 0) -> Self:
        """Create a cloud from a sequence of points."""
        return cls(np.array([tuple(p) for p in points], dtype=np.float64), frame_id)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[Point3D]:
        for x, y, z, intensity in self.points.tolist():
            yield Point3D(x, y, z, intensity)

    @property
    def xyz(self) -> npt.NDArray[np.float64]:
        return self.points[:, :3]

    @property
    def intensity(self) -> npt.NDArray[np.float64]:
        return self.points[:, 3]

    def transformed(self, angle: float, translation: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> PointCloud:
        """Rotate about the vertical axis through the origin, then translate."""
        array = self.points.copy()
        array[:, :2] = rotate_points(array[:, :2], angle)
        array[:, :3] += np.asarray(translation, dtype=np.float64)
        return type(self)(array, self.frame_id)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box, rotated about the vertical axis only.

    `w` and `h` are the bird's eye view footprint (with `w` along the
    heading), and `d` is the vertical extent.

    >>> Box3D(0, 0, 0, 4, 2, 1.5, 3 * math.pi).alpha == math.pi
    True
    """

    x: float
    y: float
    z: float
    w: float
    h: float
    d: float
    alpha: float = 0.0

    def __post_init__(self) -> None:
        _coerce_floats(self, 'x', 'y', 'z', 'w', 'h', 'd', 'alpha')
        _check_finite(self)
        if self.w <= 0 or self.h <= 0 or self.d <= 0:
            raise InvalidGeometryError(f'box sides must be positive, got w={self.w}, h={self.h}, d={self.d}')
        object.__setattr__(self, 'alpha', normalize_angle(self.alpha))

    @property
    def center(self) -> tuple[float, float, float]:
        return self.x, self.y, self.z

    @property
    def size(self) -> tuple[float, float, float]:
        return self.w, self.h, self.d

    @property
    def volume(self) -> float:
        return self.w * self.h * self.d

    @property
    def bottom(self) -> float:
        return self.z - self.d / 2

    @property
    def top(self) -> float:
        return self.z + self.d / 2

    def corners_bev(self) -> npt.NDArray[np.float64]:
        """Get the footprint corners in meters, counter-clockwise."""
        return rotated_rect_corners(Region2D(self.x, self.y, self.w, self.h, self.alpha))

    def with_center(self, x: float, y: float, z: float | None = None) -> Box3D:
        return replace(self, x=x, y=y, z=self.z if z is None else z)

    def transformed(self, angle: float, translation: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> Box3D:
        """Apply the same rigid motion as `PointCloud.transformed`."""
        (x, y), = rotate_points([(self.x, self.y)], angle)
        dx, dy, dz = translation
        return replace(self, x=float(x) + dx, y=float(y) + dy, z=self.z + dz, alpha=self.alpha + angle)


@dataclass(frozen=True)
class Region2D:
    """Rotated rectangle in pseudo image pixels.

    The centre is continuous, so sub-pixel positions are allowed. The
    angle is stored as given, as search regions use `alpha + i * step`.
    """

    x: float
    y: float
    w: float
    h: float
    alpha: float = 0.0

    def __post_init__(self) -> None:
        _coerce_floats(self, 'x', 'y', 'w', 'h', 'alpha')
        _check_finite(self)
        if self.w <= 0 or self.h <= 0:
            raise InvalidGeometryError(f'region sides must be positive, got w={self.w}, h={self.h}')

    @property
    def center(self) -> tuple[float, float]:
        return self.x, self.y

    @property
    def size(self) -> tuple[float, float]:
        return self.w, self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def with_center(self, x: float, y: float) -> Region2D:
        return replace(self, x=x, y=y)

    def with_size(self, w: float, h: float) -> Region2D:
        return replace(self, w=w, h=h)

    def with_alpha(self, alpha: float) -> Region2D:
        return replace(self, alpha=alpha)

    def corners(self) -> npt.NDArray[np.float64]:
        return rotated_rect_corners(self)


@dataclass(frozen=True)
class GridSpec:
    """The bird's eye view grid that pseudo images are defined on.

    >>> GridSpec().shape
    (500, 500)
    >>> GridSpec(-4, 4, -2, 2, pillar_size=0.3).shape
    (14, 27)
    """

    x_min: float = -40.0
    x_max: float = 40.0
    y_min: float = -40.0
    y_max: float = 40.0
    pillar_size: float = 0.16
    z_min: float = -3.0
    z_max: float = 1.0

    def __post_init__(self) -> None:
        for field in fields(self):
            value = getattr(self, field.name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f'grid.{field.name} must be a finite number, got {value!r}')
            object.__setattr__(self, field.name, float(value))
        if self.x_max <= self.x_min:
            raise ConfigError(f'grid.x_max ({self.x_max}) must be greater than grid.x_min ({self.x_min})')
        if self.y_max <= self.y_min:
            raise ConfigError(f'grid.y_max ({self.y_max}) must be greater than grid.y_min ({self.y_min})')
        if self.z_max <= self.z_min:
            raise ConfigError(f'grid.z_max ({self.z_max}) must be greater than grid.z_min ({self.z_min})')
        if self.pillar_size <= 0:
            raise ConfigError(f'grid.pillar_size must be positive, got {self.pillar_size}')

    @property
    def width(self) -> int:
        """Number of pixel columns (along x)."""
        return math.ceil(round((self.x_max - self.x_min) / self.pillar_size, 9))

    @property
    def height(self) -> int:
        """Number of pixel rows (along y)."""
        return math.ceil(round((self.y_max - self.y_min) / self.pillar_size, 9))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_pixels(self, x: float, y: float) -> tuple[float, float]:
        """Convert a position in meters to continuous pixel coordinates."""
        return (x - self.x_min) / self.pillar_size, (y - self.y_min) / self.pillar_size

    def to_meters(self, px: float, py: float) -> tuple[float, float]:
        """Convert continuous pixel coordinates to meters."""
        return self.x_min + px * self.pillar_size, self.y_min + py * self.pillar_size


@dataclass(frozen=True)
class Track:
    """Ground truth boxes of one object over consecutive frames.

    `track_id` is the sequence the object belongs to, and `object_id`
    identifies the object within it.
    """

    track_id: int
    object_id: int
    frames: tuple[tuple[int, Box3D], ...]
    class_name: str = DEFAULT_CLASS

    def __post_init__(self) -> None:
        frames = tuple((int(frame_id), box) for frame_id, box in self.frames)
        if not frames:
            raise InvalidGeometryError(f'track {self.track_id}:{self.object_id} has no frames')
        for (previous, _), (current, _) in zip(frames, frames[1:]):
            if current <= previous:
                raise InvalidGeometryError(f'track {self.track_id}:{self.object_id} frame ids must be '
                                           f'strictly increasing, got {previous} then {current}')
        object.__setattr__(self, 'frames', frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[tuple[int, Box3D]]:
        return iter(self.frames)

    @property
    def frame_ids(self) -> list[int]:
        return [frame_id for frame_id, _ in self.frames]

    @property
    def boxes(self) -> list[Box3D]:
        return [box for _, box in self.frames]

    def box_at(self, frame_id: int) -> Box3D | None:
        """Get the box for a frame, or None if the object is not labelled there."""
        for current, box in self.frames:
            if current == frame_id:
                return box
        return None
