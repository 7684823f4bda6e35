import math

import numpy as np
import pytest

from voxeltrack.exceptions import ConfigError, InvalidGeometryError, OutOfRangeError
from voxeltrack.geometry import box_to_region, region_to_box
from voxeltrack.types import Box3D, GridSpec, Point3D, PointCloud, Region2D, Track
from voxeltrack.utils.math import (normalize_angle, polygon_area, polygon_clip, rotate_points,
                                   rotated_rect_corners, rotation_matrix)


GRID = GridSpec()


def random_box(rng: np.random.Generator) -> Box3D:
    return Box3D(rng.uniform(-35, 35), rng.uniform(-35, 35), rng.uniform(-2, 0),
                 rng.uniform(0.5, 6), rng.uniform(0.5, 3), rng.uniform(0.5, 2), rng.uniform(-math.pi, math.pi))


class TestNormalizeAngle:

    def test_three_halves_pi(self):
        assert normalize_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2, abs=1e-12)

    def test_pi_is_inclusive(self):
        assert normalize_angle(math.pi) == math.pi
        assert normalize_angle(-math.pi) == math.pi

    def test_negative_seven_pi(self):
        assert normalize_angle(-7 * math.pi) == pytest.approx(math.pi, abs=1e-9)

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for alpha in rng.uniform(-50, 50, 1000):
            once = normalize_angle(alpha)
            assert -math.pi < once <= math.pi
            assert normalize_angle(once) == once
            assert math.cos(once) == pytest.approx(math.cos(alpha), abs=1e-9)
            assert math.sin(once) == pytest.approx(math.sin(alpha), abs=1e-9)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            normalize_angle(math.inf)


class TestRotatedRectCorners:

    def test_axis_aligned_square(self):
        corners = rotated_rect_corners(Region2D(0, 0, 2, 2, 0))
        np.testing.assert_allclose(corners, [[-1, -1], [1, -1], [1, 1], [-1, 1]])

    def test_square_symmetry(self):
        rotated = rotated_rect_corners(Region2D(0, 0, 2, 2, math.pi / 2))
        plain = rotated_rect_corners(Region2D(0, 0, 2, 2, 0))
        assert sorted(map(tuple, np.round(rotated, 9))) == sorted(map(tuple, np.round(plain, 9)))

    def test_distances_to_centre(self):
        corners = rotated_rect_corners(Region2D(0, 0, 4, 2, math.pi / 4))
        np.testing.assert_allclose(np.hypot(corners[:, 0], corners[:, 1]), math.sqrt(5), atol=1e-12)

    def test_counter_clockwise(self):
        corners = rotated_rect_corners(Region2D(3, -2, 5, 1, 2.0))
        x, y = corners[:, 0], corners[:, 1]
        signed_area = (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2
        assert signed_area == pytest.approx(5.0)

    def test_matches_rotation_of_unrotated(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x, y, w, h, alpha = rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(1, 5), rng.uniform(1, 5), \
                rng.uniform(-4, 4)
            rotated = rotated_rect_corners(Region2D(x, y, w, h, alpha))
            expected = rotate_points(rotated_rect_corners(Region2D(x, y, w, h, 0)), alpha, (x, y))
            np.testing.assert_allclose(rotated, expected, atol=1e-12)


class TestBoxRegion:

    def test_grid_midpoint(self):
        region = box_to_region(Box3D(0, 0, 0, 3.2, 1.6, 1.5, 0), GRID)
        assert region.x == pytest.approx(250)
        assert region.y == pytest.approx(250)
        assert region.w == pytest.approx(20)
        assert region.h == pytest.approx(10)
        assert region.alpha == 0

    def test_grid_boundary(self):
        region = box_to_region(Box3D(-40, 0, 0, 3.2, 1.6, 1.5, 0), GRID)
        assert region.x == 0

    def test_inverse(self):
        box = region_to_box(Region2D(250, 250, 20, 10, 0), GRID, z=1.5, d=1.4)
        assert box.x == pytest.approx(0, abs=1e-9)
        assert box.y == pytest.approx(0, abs=1e-9)
        assert box.w == pytest.approx(3.2)
        assert box.h == pytest.approx(1.6)
        assert box.z == 1.5
        assert box.d == 1.4

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            box = random_box(rng)
            result = region_to_box(box_to_region(box, GRID), GRID, box.z, box.d)
            np.testing.assert_allclose([result.x, result.y, result.w, result.h, result.alpha],
                                       [box.x, box.y, box.w, box.h, box.alpha], atol=1e-9)

    def test_converse_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            region = Region2D(rng.uniform(20, 480), rng.uniform(20, 480), rng.uniform(2, 30), rng.uniform(2, 30),
                              rng.uniform(-3, 3))
            result = box_to_region(region_to_box(region, GRID, 0.0, 1.0), GRID)
            np.testing.assert_allclose([result.x, result.y, result.w, result.h, result.alpha],
                                       [region.x, region.y, region.w, region.h, region.alpha], atol=1e-9)

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            box_to_region(Box3D(100, 0, 0, 4, 2, 1.5), GRID)

    def test_partly_inside(self):
        region = box_to_region(Box3D(40.5, 0, 0, 4, 2, 1.5), GRID)
        assert region.x > GRID.width


class TestTypes:

    def test_box_validation(self):
        with pytest.raises(InvalidGeometryError):
            Box3D(0, 0, 0, 0, 1, 1)
        with pytest.raises(InvalidGeometryError):
            Box3D(0, 0, 0, 1, 1, 1, math.nan)

    def test_box_alpha_normalized(self):
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi / 2).alpha == pytest.approx(-math.pi / 2)

    def test_region_validation(self):
        with pytest.raises(InvalidGeometryError):
            Region2D(0, 0, 1, -1)

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            GridSpec(x_min=1, x_max=0)
        with pytest.raises(ConfigError):
            GridSpec(pillar_size=0)

    def test_grid_dims(self):
        assert GridSpec().shape == (500, 500)
        assert GridSpec(0, 1, 0, 1, pillar_size=0.3).shape == (4, 4)

    def test_cloud_is_read_only(self):
        cloud = PointCloud.from_points([Point3D(1, 2, 3, 0.5), Point3D(4, 5, 6)])
        assert len(cloud) == 2
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 10

    def test_cloud_transform_matches_box(self):
        box = Box3D(3, 1, -1, 4, 2, 1.5, 0.2)
        cloud = PointCloud.from_points([Point3D(box.x, box.y, box.z)])
        moved_cloud = cloud.transformed(0.7, (1, 2, 0.5))
        moved_box = box.transformed(0.7, (1, 2, 0.5))
        np.testing.assert_allclose(moved_cloud.xyz[0], moved_box.center, atol=1e-12)
        assert moved_box.alpha == pytest.approx(0.9)

    def test_track_ordering(self):
        box = Box3D(0, 0, 0, 1, 1, 1)
        with pytest.raises(InvalidGeometryError):
            Track(0, 1, ((2, box), (1, box)))
        with pytest.raises(InvalidGeometryError):
            Track(0, 1, ())
        track = Track(0, 1, ((1, box), (3, box)))
        assert track.frame_ids == [1, 3]
        assert track.box_at(2) is None


class TestPolygons:

    def test_rotation_matrix(self):
        np.testing.assert_allclose(rotation_matrix(math.pi / 2) @ [1, 0], [0, 1], atol=1e-15)

    def test_clip_overlap(self):
        square = [(0, 0), (2, 0), (2, 2), (0, 2)]
        shifted = [(1, 1), (3, 1), (3, 3), (1, 3)]
        assert polygon_area(polygon_clip(square, shifted)) == pytest.approx(1.0)

    def test_clip_disjoint(self):
        square = [(0, 0), (1, 0), (1, 1), (0, 1)]
        far = [(5, 5), (6, 5), (6, 6), (5, 6)]
        assert polygon_area(polygon_clip(square, far)) == 0.0

    def test_clip_contained(self):
        outer = rotated_rect_corners(Region2D(0, 0, 10, 10, 0.3))
        inner = rotated_rect_corners(Region2D(0, 0, 2, 1, 1.1))
        assert polygon_area(polygon_clip(inner, outer)) == pytest.approx(2.0)
