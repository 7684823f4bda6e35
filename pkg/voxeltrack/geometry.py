"""Conversions between boxes in meters and regions in pseudo image pixels."""

from .exceptions import OutOfRangeError
from .types import Box3D, GridSpec, Region2D


def box_to_region(box: Box3D, grid: GridSpec) -> Region2D:
    """Project a box onto the grid as a rotated pixel rectangle.

    Raises:
        OutOfRangeError: If the footprint does not touch the grid.
    """
    corners = box.corners_bev()
    x_lo, y_lo = corners.min(axis=0)
    x_hi, y_hi = corners.max(axis=0)
    if x_hi < grid.x_min or x_lo > grid.x_max or y_hi < grid.y_min or y_lo > grid.y_max:
        raise OutOfRangeError(f'box footprint x=[{x_lo:.3f}, {x_hi:.3f}], y=[{y_lo:.3f}, {y_hi:.3f}] '
                              f'is outside the grid x=[{grid.x_min}, {grid.x_max}], '
                              f'y=[{grid.y_min}, {grid.y_max}]')

    x, y = grid.to_pixels(box.x, box.y)
    return Region2D(x, y, box.w / grid.pillar_size, box.h / grid.pillar_size, box.alpha)


def region_to_box(region: Region2D, grid: GridSpec, z: float, d: float) -> Box3D:
    """Lift a pixel region back into meters with the given height values."""
    x, y = grid.to_meters(region.x, region.y)
    return Box3D(x, y, z, region.w * grid.pillar_size, region.h * grid.pillar_size, d, region.alpha)
