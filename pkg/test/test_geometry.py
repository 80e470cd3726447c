# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

import numpy as np
import pytest

import src.geometry as geometry
from src.geometry import Polygon


def rect(x0, y0, x1, y1):
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def rect_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


@pytest.fixture(params=[0, 1, 2])
def rect_pairs(request):
    """Random axis-aligned rectangle pairs as (x0, y0, x1, y1) tuples."""
    rng = np.random.default_rng(request.param)
    pairs = []
    for _ in range(500):
        boxes = []
        for _ in range(2):
            x0, y0 = rng.uniform(0, 4, size=2)
            w, h = rng.uniform(2, 6, size=2)
            boxes.append((x0, y0, x0 + w, y0 + h))
        pairs.append(tuple(boxes))
    return pairs


class TestPolygon:
    def test_orientation(self):
        cw = Polygon([(0, 0), (0, 1), (1, 1), (1, 0)])
        assert geometry.signed_area(cw.vertices) == pytest.approx(1.0)
        assert geometry.polygon_area(cw) == pytest.approx(1.0)

    def test_area_of_raw_vertices(self):
        assert geometry.polygon_area([(0, 0), (4, 0), (4, 3)]) == pytest.approx(6.0)
        assert geometry.polygon_area([(0, 0), (0, 3), (4, 0)]) == pytest.approx(-6.0)

    def test_too_few_points(self):
        with pytest.raises(geometry.GeometryError):
            geometry.polygon_area([(0, 0), (1, 1), (0, 0)])
        with pytest.raises(geometry.GeometryError):
            Polygon([(0, 0), (1, 1), (1, 1), (0, 0)])

    def test_collinear(self):
        with pytest.raises(geometry.GeometryError):
            Polygon([(0, 0), (1, 1), (2, 2)])

    def test_repeated_vertices_dropped(self):
        p = Polygon([(0, 0), (2, 0), (2, 0), (2, 2), (0, 2), (0, 0)])
        assert len(p) == 4

    def test_bowtie_repaired(self):
        p = Polygon([(0, 0), (2, 2), (2, 0), (0, 2)])
        assert geometry.polygon_area(p) == pytest.approx(4.0)

    def test_bounds_and_transforms(self):
        p = rect(1, 2, 3, 5)
        assert p.bounds == (1, 2, 3, 5)
        assert p.scaled(2).bounds == (2, 4, 6, 10)
        shift = np.array([[1, 0, 10], [0, 1, -2]])
        assert p.transformed(shift).bounds == (11, 0, 13, 3)
        assert p.clipped(2, 4).bounds == (1, 2, 2, 4)
        assert p.inside(3, 5) and not p.inside(2.5, 5)


class TestRasterize:
    def test_cell_centres(self):
        mask = geometry.rasterize(rect(1, 1, 4, 3), (5, 5))
        assert np.count_nonzero(mask) == 6
        assert mask[1:3, 1:4].all()

    def test_origin_and_cell(self):
        mask = geometry.rasterize(rect(10, 10, 12, 12), (4, 4), origin=(10, 10), cell=(0.5, 0.5))
        assert mask.all()


class TestOverlap:
    def test_identical(self):
        assert geometry.polygon_iou(rect(0, 0, 3, 2), rect(0, 0, 3, 2)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert geometry.polygon_iou(rect(0, 0, 1, 1), rect(2, 2, 3, 3)) == 0.0
        assert geometry.intersection_fractions(rect(0, 0, 1, 1), rect(1, 0, 2, 1)) == (0.0, 0.0)

    def test_half_overlap(self):
        iou = geometry.polygon_iou(rect(0, 0, 1, 1), rect(0.5, 0, 1.5, 1), 512)
        assert iou == pytest.approx(1 / 3, abs=0.01)

    def test_fractions(self):
        small, big = rect(0, 0, 1, 1), rect(0, 0, 2, 2)
        covered_small, covered_big = geometry.intersection_fractions(small, big)
        assert covered_small == pytest.approx(1.0, abs=0.01)
        assert covered_big == pytest.approx(0.25, abs=0.01)

    def test_against_closed_form(self, rect_pairs):
        errors = np.array([abs(geometry.polygon_iou(rect(*a), rect(*b), 512) - rect_iou(a, b))
                           for a, b in rect_pairs])
        # One cell of misplacement per edge bounds the error by 4 cells;
        # almost every pair stays within 2.
        assert errors.max() <= 4 / 512
        assert np.quantile(errors, 0.99) <= 2 / 512


class TestContours:
    def test_square_block(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 3:6] = True
        polys = geometry.trace_contours(mask)
        assert len(polys) == 1
        assert geometry.polygon_area(polys[0]) == pytest.approx(9.0)
        assert polys[0].bounds == (3, 2, 6, 5)

    def test_small_components_dropped(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[0:2, 0:2] = True
        mask[5:8, 5:8] = True
        assert len(geometry.trace_contours(mask)) == 1
        assert len(geometry.trace_contours(mask, min_pixels=4)) == 2

    def test_diagonal_neighbours_separate(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[0:3, 0:3] = True
        mask[3:6, 3:6] = True
        assert len(geometry.trace_contours(mask)) == 2

    def test_hole_ignored(self):
        mask = np.zeros((9, 9), dtype=bool)
        mask[1:8, 1:8] = True
        mask[3:6, 3:6] = False
        polys = geometry.trace_contours(mask)
        assert len(polys) == 1
        assert geometry.polygon_area(polys[0]) == pytest.approx(49.0)

    def test_empty(self):
        assert geometry.trace_contours(np.zeros((5, 5), dtype=bool)) == []

    @pytest.mark.parametrize("sides", [4, 6, 12])
    def test_recovers_convex_polygon(self, sides):
        angles = np.linspace(0, 2 * np.pi, sides, endpoint=False) + 0.3
        p = Polygon(np.stack([32 + 20 * np.cos(angles), 32 + 14 * np.sin(angles)], axis=1))
        polys = geometry.trace_contours(geometry.rasterize(p, (64, 64)))
        assert len(polys) == 1
        area = geometry.polygon_area(p)
        assert abs(geometry.polygon_area(polys[0]) - area) <= 0.05 * area
