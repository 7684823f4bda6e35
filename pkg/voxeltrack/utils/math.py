"""General math functions."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Sequence

import numpy as np
import numpy.typing as npt

from ..constants import ANGLE_TOLERANCE, TAU

if TYPE_CHECKING:
    from ..types import Region2D


def normalize_angle(alpha: float) -> float:
    """Wrap an angle into the range (-pi, pi].

    >>> round(normalize_angle(3 * math.pi / 2), 6)
    -1.570796
    >>> normalize_angle(math.pi) == math.pi
    True
    >>> normalize_angle(-math.pi) == math.pi
    True
    """
    if not math.isfinite(alpha):
        raise ValueError(f'angle must be finite, got {alpha}')
    result = math.remainder(alpha, TAU)
    if result <= -math.pi + ANGLE_TOLERANCE or result > math.pi:
        return math.pi
    return result


def rotation_matrix(alpha: float) -> npt.NDArray[np.float64]:
    """Get the counter-clockwise 2D rotation matrix for an angle."""
    cos, sin = math.cos(alpha), math.sin(alpha)
    return np.array([[cos, -sin], [sin, cos]], dtype=np.float64)


def rotate_points(points: npt.ArrayLike, alpha: float,
                  origin: Sequence[float] = (0.0, 0.0)) -> npt.NDArray[np.float64]:
    """Rotate an (N, 2) array of points counter-clockwise about an origin."""
    array = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    centre = np.asarray(origin, dtype=np.float64)
    return (array - centre) @ rotation_matrix(alpha).T + centre


def rotated_rect_corners(region: Region2D) -> npt.NDArray[np.float64]:
    """Get the 4 corners of a rotated rectangle in counter-clockwise order.

    The rectangle is rotated by `region.alpha` about its own centre, and
    the first corner is the one that starts at (-w/2, -h/2).
    """
    half_w = region.w / 2
    half_h = region.h / 2
    local = np.array([[-half_w, -half_h], [half_w, -half_h],
                      [half_w, half_h], [-half_w, half_h]], dtype=np.float64)
    return local @ rotation_matrix(region.alpha).T + np.array([region.x, region.y])


def calculate_distance(p1: Sequence[float], p2: Sequence[float]) -> float:
    """Find the euclidean distance between two coordinates of any dimension."""
    return math.dist(p1, p2)


def _cross(o: npt.NDArray[np.float64], a: npt.NDArray[np.float64], b: npt.NDArray[np.float64]) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def _line_intersection(p1: npt.NDArray[np.float64], p2: npt.NDArray[np.float64],
                       q1: npt.NDArray[np.float64], q2: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Intersect the segment p1-p2 with the infinite line through q1-q2."""
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    if d1 == d2:
        return p1.copy()
    t = d1 / (d1 - d2)
    return p1 + t * (p2 - p1)


def polygon_clip(subject: npt.ArrayLike, clip: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Clip a polygon by a convex counter-clockwise polygon.
    Uses the Sutherland-Hodgman algorithm.

    Returns:
        The intersection polygon as an (N, 2) array, which may be empty.
    """
    clip_polygon = np.asarray(clip, dtype=np.float64)
    output = list(np.asarray(subject, dtype=np.float64))

    for i in range(len(clip_polygon)):
        if not output:
            break
        edge_start = clip_polygon[i]
        edge_end = clip_polygon[(i + 1) % len(clip_polygon)]
        candidates = output
        output = []

        previous = candidates[-1]
        previous_inside = _cross(edge_start, edge_end, previous) >= 0
        for current in candidates:
            current_inside = _cross(edge_start, edge_end, current) >= 0
            if current_inside:
                if not previous_inside:
                    output.append(_line_intersection(previous, current, edge_start, edge_end))
                output.append(current)
            elif previous_inside:
                output.append(_line_intersection(previous, current, edge_start, edge_end))
            previous, previous_inside = current, current_inside

    if not output:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array(output, dtype=np.float64)


def polygon_area(polygon: npt.ArrayLike) -> float:
    """Calculate the unsigned area of a simple polygon (shoelace formula).

    >>> polygon_area([(0, 0), (2, 0), (2, 1), (0, 1)])
    2.0
    """
    array = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if len(array) < 3:
        return 0.0
    x, y = array[:, 0], array[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2)
