# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""geometry.py: polygons, rasterized overlap measures and contour tracing.

Coordinates are (x, y) pixels with y pointing down. On a grid, cell (i, j)
covers [j, j+1) x [i, i+1), so its centre is (j + 0.5, i + 0.5).
"""

import logging
import typing as t

import numpy as np
import shapely.geometry
from scipy import ndimage
from skimage.draw import polygon as draw_polygon
from skimage.measure import approximate_polygon


class GeometryError(ValueError):
    """A polygon has fewer than three distinct points or no area."""


def _drop_repeats(vertices: np.ndarray) -> np.ndarray:
    keep = np.any(vertices != np.roll(vertices, 1, axis=0), axis=1)
    if not keep.any():
        return vertices[:1]
    return vertices[keep]


def signed_area(vertices) -> float:
    """Shoelace area; positive when the vertices run counter-clockwise in x/y."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class Polygon:
    """
    A simple polygon stored counter-clockwise (positive shoelace area).

    Construction repairs the input: duplicate consecutive vertices are
    dropped and a self-intersecting ring is replaced by its convex hull.

    Args:
      vertices: sequence of (x, y) pairs.

    Raises:
      GeometryError: fewer than three distinct points, or zero area.
    """

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        v = _drop_repeats(v)
        if len(np.unique(v, axis=0)) < 3:
            raise GeometryError("polygon needs 3 distinct points, got {}".format(len(v)))
        if not shapely.geometry.Polygon(v).is_valid:
            hull = shapely.geometry.MultiPoint([tuple(p) for p in v]).convex_hull
            if hull.geom_type != "Polygon":
                raise GeometryError("degenerate polygon with collinear points")
            logging.debug("Repaired invalid polygon of %s vertices with its hull.", len(v))
            v = np.asarray(hull.exterior.coords, dtype=np.float64)[:-1]
        area = signed_area(v)
        if area == 0:
            raise GeometryError("polygon has zero area")
        self.vertices = v if area > 0 else v[::-1].copy()
        """n x 2 float64 array of (x, y) vertices."""

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return "Polygon({})".format(self.vertices.tolist())

    @property
    def bounds(self) -> t.Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def transformed(self, matrix: np.ndarray) -> "Polygon":
        """Apply a 2x3 or 3x3 affine matrix to every vertex."""
        m = np.asarray(matrix, dtype=np.float64)
        return Polygon(self.vertices @ m[:2, :2].T + m[:2, 2])

    def scaled(self, sx: float, sy: float = None) -> "Polygon":
        sy = sx if sy is None else sy
        return Polygon(self.vertices * np.array([sx, sy]))

    def clipped(self, width: float, height: float) -> "Polygon":
        """Clamp every vertex into [0, width] x [0, height]."""
        v = self.vertices.copy()
        v[:, 0] = np.clip(v[:, 0], 0, width)
        v[:, 1] = np.clip(v[:, 1], 0, height)
        return Polygon(v)

    def inside(self, width: float, height: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin >= 0 and ymin >= 0 and xmax <= width and ymax <= height


def polygon_area(p: t.Union[Polygon, t.Sequence]) -> float:
    """
    Shoelace area in px^2, positive for counter-clockwise vertices.

    Raises:
      GeometryError: fewer than 3 distinct points.
    """
    v = p.vertices if isinstance(p, Polygon) else np.asarray(p, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(v, axis=0)) < 3:
        raise GeometryError("area of fewer than 3 distinct points")
    return signed_area(v)


def rasterize(p: Polygon, shape: t.Tuple[int, int], origin=(0.0, 0.0),
              cell=(1.0, 1.0)) -> np.ndarray:
    """
    Boolean grid of the cells whose centres lie inside p.

    Args:
      shape: (rows, cols) of the grid.
      origin: (x, y) of the grid's top-left corner.
      cell: (width, height) of one cell.
    """
    v = p.vertices
    cols = (v[:, 0] - origin[0]) / cell[0] - 0.5
    rows = (v[:, 1] - origin[1]) / cell[1] - 0.5
    rr, cc = draw_polygon(rows, cols, shape=shape)
    mask = np.zeros(shape, dtype=bool)
    mask[rr, cc] = True
    return mask


def _joint_masks(a: Polygon, b: Polygon, raster_res: int):
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return None
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    cell = ((max(ax1, bx1) - x0) / raster_res, (max(ay1, by1) - y0) / raster_res)
    shape = (raster_res, raster_res)
    return rasterize(a, shape, (x0, y0), cell), rasterize(b, shape, (x0, y0), cell)


def polygon_iou(a: Polygon, b: Polygon, raster_res: int = 512) -> float:
    """
    Intersection over union by counting cells of a raster_res x raster_res
    grid laid over the joint bounding box. Disjoint polygons give 0.
    """
    masks = _joint_masks(a, b, raster_res)
    if masks is None:
        return 0.0
    ma, mb = masks
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def intersection_fractions(a: Polygon, b: Polygon,
                           raster_res: int = 512) -> t.Tuple[float, float]:
    """Returns (|A n B| / |A|, |A n B| / |B|) on the same grid as polygon_iou."""
    masks = _joint_masks(a, b, raster_res)
    if masks is None:
        return 0.0, 0.0
    ma, mb = masks
    inter = np.count_nonzero(ma & mb)
    na, nb = np.count_nonzero(ma), np.count_nonzero(mb)
    return (inter / na if na else 0.0), (inter / nb if nb else 0.0)


def _trace_outer(component: np.ndarray) -> t.List[t.Tuple[int, int]]:
    # Walk the cell edges with the component on the right-hand side; turning
    # right first at ambiguous corners keeps diagonal cells apart.
    grid = np.pad(component, 1)
    rows, cols = np.nonzero(grid)
    x, y = int(cols[0]), int(rows[0])
    dx, dy = 1, 0
    start = (x, y, dx, dy)
    vertices = [(x, y)]
    while True:
        x += dx
        y += dy
        rx, ry = -dy, dx
        ahead_right = grid[y + (dy + ry - 1) // 2, x + (dx + rx - 1) // 2]
        ahead_left = grid[y + (dy - ry - 1) // 2, x + (dx - rx - 1) // 2]
        if not ahead_right:
            heading = (rx, ry)
        elif ahead_left:
            heading = (-rx, -ry)
        else:
            heading = (dx, dy)
        if (x, y) + heading == start:
            break
        if heading != (dx, dy):
            vertices.append((x, y))
        dx, dy = heading
    return [(vx - 1, vy - 1) for vx, vy in vertices]


def trace_contours(mask: np.ndarray, min_pixels: int = 9,
                   tolerance: float = 1.0) -> t.List[Polygon]:
    """
    Outline each 4-connected foreground component of a binary grid.

    Args:
      mask: 2-D boolean grid.
      min_pixels: smaller components are discarded.
      tolerance: Douglas-Peucker tolerance in cells.

    Returns:
      one polygon per kept component, in grid coordinates.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool))
    polygons = []
    for k, region in enumerate(ndimage.find_objects(labels), start=1):
        component = labels[region] == k
        if np.count_nonzero(component) < min_pixels:
            continue
        ring = np.asarray(_trace_outer(component), dtype=np.float64)
        ring += (region[1].start, region[0].start)
        closed = np.vstack([ring, ring[:1]])
        simplified = approximate_polygon(closed, tolerance=tolerance)[:-1]
        try:
            polygons.append(Polygon(simplified if len(simplified) >= 3 else ring))
        except GeometryError:
            logging.debug("Dropped a degenerate contour of component %s.", k)
    return polygons
