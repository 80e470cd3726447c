# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""synth_data.py: deterministic synthetic scene-text images and augmentation.

Each image has a smooth textured background and a few "words": rows of
glyph-like rectangles and arcs laid along straight or quadratic Bezier
baselines. The ground truth of a word is its baseline ribbon, dilated
slightly, as an integer polygon.
"""

import dataclasses
import logging
import math
import typing as t

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as draw_polygon
from skimage.transform import AffineTransform, warp

import src.geometry as geometry
import src.settings as settings
from src.geometry import Polygon
from src.rng import SplitMix64, Xoshiro256

PLACEMENT_ATTEMPTS = 60
"""Candidate positions tried for each word before it is skipped."""

MIN_TEXT_HEIGHT = 1.0
"""Smallest text height, in pixels, a word shrinks to so that min_instances fit."""

SCALE_RANGE = (0.5, 2.0)
ROTATION_RANGE = (-10.0, 10.0)
FLIP_PROB = 0.5


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    height: int = 96
    width: int = 96
    min_instances: int = 1
    max_instances: int = 8
    curve_prob: float = 0.3
    small_text_prob: float = 0.3

    @classmethod
    def from_settings(cls) -> "SynthConfig":
        return cls(settings.image_height, settings.image_width,
                   settings.min_instances, settings.max_instances,
                   settings.curve_prob, settings.small_text_prob)


@dataclasses.dataclass
class SceneSample:
    image: np.ndarray
    """3 x H x W float32 array with values in [0, 1]."""

    instances: t.List[Polygon]
    """Ground-truth word polygons, inside the image and pairwise disjoint."""

    seed: int

    text_heights: t.List[float] = dataclasses.field(default_factory=list)
    """Glyph height of each instance, in pixels."""

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


def _smooth_field(rng: Xoshiro256, height: int, width: int, cells: int) -> np.ndarray:
    coarse = np.array([[rng.random() for _ in range(cells)] for _ in range(cells)])
    knots = np.linspace(0.0, 1.0, cells)
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    rows = np.stack([np.interp(xs, knots, coarse[i]) for i in range(cells)])
    return np.stack([np.interp(ys, knots, rows[:, j]) for j in range(width)], axis=1)


def _background(rng: Xoshiro256, height: int, width: int) -> t.Tuple[np.ndarray, float]:
    base = np.array([rng.uniform(0.15, 0.85) for _ in range(3)])
    texture = _smooth_field(rng, height, width, 5) - 0.5
    image = base[:, None, None] + 0.25 * texture[None] * np.array([rng.uniform(0.5, 1.0) for _ in range(3)])[:, None, None]
    return np.clip(image, 0.0, 1.0), float(base.mean())


def _baseline(center, length: float, angle: float, bend: float, s: np.ndarray):
    """Points and unit normals along a straight (bend 0) or bent baseline."""
    u = np.array([math.cos(angle), math.sin(angle)])
    n = np.array([-u[1], u[0]])
    p0 = center - 0.5 * length * u
    p2 = center + 0.5 * length * u
    p1 = center + 2.0 * bend * n
    s = s[:, None]
    points = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2
    tangent = 2 * (1 - s) * (p1 - p0) + 2 * s * (p2 - p1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return points, tangent, normal


def _word_candidate(rng: Xoshiro256, cfg: SynthConfig, text_height: float, shrink: float):
    length = min(text_height * rng.uniform(2.5, 7.0), 0.8 * cfg.width) * shrink
    angle = math.radians(rng.uniform(-30.0, 30.0))
    bend = 0.0
    if rng.bernoulli(cfg.curve_prob):
        bend = rng.uniform(0.15, 0.3) * length * (1 if rng.bernoulli(0.5) else -1)
    center = np.array([rng.uniform(0, cfg.width), rng.uniform(0, cfg.height)])

    if bend == 0.0:
        samples = 2
    else:
        samples = max(3, min(9, int(length // max(4.0, text_height)) + 1))
    s = np.linspace(0.0, 1.0, samples)
    points, _, normal = _baseline(center, length, angle, bend, s)
    half = 0.5 * text_height + max(1.0, 0.15 * text_height)
    ring = np.vstack([points + half * normal, (points - half * normal)[::-1]])
    return np.round(ring), (center, length, angle, bend)


def _glyphs(rng: Xoshiro256, text_height: float, shape) -> t.List[np.ndarray]:
    center, length, angle, bend = shape
    count = max(1, int(round(length / (0.7 * text_height))))
    s = (np.arange(count) + 0.5) / count
    points, tangent, normal = _baseline(center, length, angle, bend, s)
    glyphs = []
    for p, u, n in zip(points, tangent, normal):
        w = 0.5 * 0.45 * text_height * rng.uniform(0.7, 1.2)
        h = 0.5 * 0.8 * text_height * rng.uniform(0.8, 1.0)
        if rng.bernoulli(0.3):
            start = rng.uniform(0.0, 2 * math.pi)
            theta = start + np.linspace(0.0, 4 * math.pi / 3, 8)
            dirs = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * n
            outer = p + h * dirs
            inner = p + 0.5 * h * dirs
            glyphs.append(np.vstack([outer, inner[::-1]]))
        else:
            glyphs.append(np.array([p - w * u - h * n, p + w * u - h * n,
                                    p + w * u + h * n, p - w * u + h * n]))
    return glyphs


def _fill(image: np.ndarray, vertices: np.ndarray, color: np.ndarray):
    rr, cc = draw_polygon(vertices[:, 1] - 0.5, vertices[:, 0] - 0.5, shape=image.shape[1:])
    image[:, rr, cc] = color[:, None]


def _valid_ring(ring: np.ndarray) -> t.Optional[np.ndarray]:
    """The ring oriented counter-clockwise if Polygon() keeps it unchanged."""
    if geometry.signed_area(ring) < 0:
        ring = ring[::-1]
    try:
        repaired = Polygon(ring)
    except geometry.GeometryError:
        return None
    if repaired.vertices.shape != ring.shape or not np.array_equal(repaired.vertices, ring):
        return None
    return ring


def _claim(ring: np.ndarray, occupied: np.ndarray) -> bool:
    """Mark the ring's dilated footprint occupied unless it touches a placed word."""
    footprint = ndimage.binary_dilation(
        geometry.rasterize(Polygon(ring), occupied.shape), iterations=2)
    if (footprint & occupied).any():
        return False
    occupied |= footprint
    return True


def _place(rng: Xoshiro256, cfg: SynthConfig, occupied: np.ndarray, text_height: float):
    for attempt in range(PLACEMENT_ATTEMPTS):
        ring, shape = _word_candidate(rng, cfg, text_height, 0.85 ** (attempt // 15))
        if ring[:, 0].min() < 1 or ring[:, 1].min() < 1 \
                or ring[:, 0].max() > cfg.width - 1 or ring[:, 1].max() > cfg.height - 1:
            continue
        ring = _valid_ring(ring)
        if ring is not None and _claim(ring, occupied):
            return ring, shape
    return None


def _place_straight(cfg: SynthConfig, occupied: np.ndarray, text_height: float):
    """
    Scan the free space for a horizontal word, shrinking the text until one fits.

    Returns:
      ((ring, shape), text_height) of the placed word, or (None, text_height)
      if not even a word of MIN_TEXT_HEIGHT fits.
    """
    while True:
        half = 0.5 * text_height + max(1.0, 0.15 * text_height)
        rows, cols = int(round(2 * half)), int(round(3 * text_height))
        # The dilated footprint stays within 2 px of the box.
        for y0 in range(1, cfg.height - 1 - rows):
            for x0 in range(1, cfg.width - 1 - cols):
                if occupied[max(0, y0 - 2):y0 + rows + 3, max(0, x0 - 2):x0 + cols + 3].any():
                    continue
                ring = _valid_ring(np.array([[x0, y0], [x0 + cols, y0],
                                             [x0 + cols, y0 + rows], [x0, y0 + rows]],
                                            dtype=float))
                if ring is None or not _claim(ring, occupied):
                    continue
                center = np.array([x0 + 0.5 * cols, y0 + 0.5 * rows])
                return (ring, (center, float(cols), 0.0, 0.0)), text_height
        if text_height <= MIN_TEXT_HEIGHT:
            return None, text_height
        text_height = max(MIN_TEXT_HEIGHT, 0.7 * text_height)


def generate_sample(seed: int, cfg: SynthConfig = SynthConfig()) -> SceneSample:
    """
    Render one synthetic scene. The result is a pure function of (seed, cfg).

    Between cfg.min_instances and cfg.max_instances words are placed. A word
    that finds no room is dropped, unless fewer than min_instances are placed
    so far, in which case it is laid out straight at a smaller height instead.

    Raises:
      ValueError: the image is smaller than 32 x 32.
    """
    if cfg.height < 32 or cfg.width < 32:
        raise ValueError("synthetic images must be at least 32x32")
    rng = Xoshiro256.from_seed(seed)
    image, brightness = _background(rng, cfg.height, cfg.width)
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    wanted = rng.integers(cfg.min_instances, cfg.max_instances)
    instances, heights = [], []

    for _ in range(wanted):
        if rng.bernoulli(cfg.small_text_prob):
            text_height = rng.uniform(cfg.height / 32, cfg.height / 16)
        else:
            text_height = rng.uniform(cfg.height / 16, cfg.height / 7)
        placed = _place(rng, cfg, occupied, text_height)
        if placed is None and len(instances) < cfg.min_instances:
            placed, text_height = _place_straight(cfg, occupied, text_height)
        if placed is None:
            logging.debug("Seed %s: no room for a word of height %.1f.", seed, text_height)
            continue

        ring, shape = placed
        if brightness > 0.5:
            color = np.array([rng.uniform(0.0, 0.3) for _ in range(3)])
        else:
            color = np.array([rng.uniform(0.7, 1.0) for _ in range(3)])
        for glyph in _glyphs(rng, text_height, shape):
            _fill(image, glyph, color)
        instances.append(Polygon(ring))
        heights.append(text_height)

    return SceneSample(image.astype(np.float32), instances, seed, heights)


def sample_seed(seed: int, index: int) -> int:
    """Seed of the index-th image of a dataset generated from seed."""
    return SplitMix64(seed ^ index).next_u64()


@dataclasses.dataclass(frozen=True)
class AugmentParams:
    """
    One draw of the augmentation pipeline.

    scale: canvas scale factor; angle: rotation in degrees about the canvas
    centre, counter-clockwise on screen; crop_x, crop_y: top-left of the output
    window in canvas pixels (negative values pad); flip: mirror horizontally.
    """
    scale: float = 1.0
    angle: float = 0.0
    crop_x: int = 0
    crop_y: int = 0
    flip: bool = False


NEUTRAL = AugmentParams()


def _canvas_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    s = params.scale
    cx, cy = round(s * width) / 2, round(s * height) / 2
    a = math.radians(params.angle)
    cos_a, sin_a = math.cos(a), math.sin(a)
    scale = np.diag([s, s, 1.0])
    rotate = np.array([[cos_a, sin_a, cx - cx * cos_a - cy * sin_a],
                       [-sin_a, cos_a, cy + cx * sin_a - cy * cos_a],
                       [0, 0, 1]])
    return rotate @ scale


def augment_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    """3x3 affine map from input pixel coordinates to output coordinates."""
    crop = np.array([[1, 0, -params.crop_x], [0, 1, -params.crop_y], [0, 0, 1]], dtype=float)
    matrix = crop @ _canvas_matrix(params, height, width)
    if params.flip:
        matrix = np.array([[-1, 0, width], [0, 1, 0], [0, 0, 1]]) @ matrix
    return matrix


def _crop_range(canvas: int, window: int, lo: float, hi: float, rng: Xoshiro256) -> int:
    low, high = min(0, canvas - window), max(0, canvas - window)
    keep_low, keep_high = max(low, math.ceil(hi - window)), min(high, math.floor(lo))
    if keep_low <= keep_high:
        low, high = keep_low, keep_high
    return rng.integers(low, high)


def draw_augment_params(sample: SceneSample, seed: int) -> AugmentParams:
    """Random scaling (large-scale jittering), rotation, crop and flip."""
    rng = Xoshiro256.from_seed(seed)
    scale = math.exp(rng.uniform(math.log(SCALE_RANGE[0]), math.log(SCALE_RANGE[1])))
    angle = rng.uniform(*ROTATION_RANGE)
    flip = rng.bernoulli(FLIP_PROB)
    canvas = AugmentParams(scale, angle)
    height, width = sample.height, sample.width
    x0 = y0 = 0.0
    x1, y1 = float(width), float(height)
    if sample.instances:
        keep = sample.instances[rng.integers(0, len(sample.instances) - 1)]
        x0, y0, x1, y1 = keep.transformed(_canvas_matrix(canvas, height, width)).bounds
    crop_x = _crop_range(round(scale * width), width, x0, x1, rng)
    crop_y = _crop_range(round(scale * height), height, y0, y1, rng)
    return AugmentParams(scale, angle, crop_x, crop_y, flip)


def augment(sample: SceneSample, seed: int, params: AugmentParams = None) -> SceneSample:
    """
    Apply scaling, rotation, cropping and flipping to image and polygons.
    Instances that do not lie wholly inside the output frame are dropped.

    Args:
      sample: the sample to transform.
      seed: seed of the random draw.
      params: fixed parameters, bypassing the random draw.
    """
    params = draw_augment_params(sample, seed) if params is None else params
    if params == NEUTRAL:
        return dataclasses.replace(sample, image=sample.image.copy(),
                                   instances=list(sample.instances),
                                   text_heights=list(sample.text_heights))
    height, width = sample.height, sample.width
    matrix = augment_matrix(params, height, width)

    # warp works on pixel indices, whose centres sit half a pixel in.
    half = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]])
    index_map = np.linalg.inv(half) @ np.linalg.inv(matrix) @ half
    image = warp(sample.image.transpose(1, 2, 0), AffineTransform(matrix=index_map),
                 output_shape=(height, width), order=1, mode="constant", cval=0.0,
                 preserve_range=True)

    instances, heights = [], []
    for polygon, text_height in zip(sample.instances, sample.text_heights or
                                    [0.0] * len(sample.instances)):
        try:
            moved = polygon.transformed(matrix)
        except geometry.GeometryError:
            continue
        if moved.inside(width, height):
            instances.append(moved)
            heights.append(text_height * params.scale)
    return SceneSample(np.clip(image.transpose(2, 0, 1), 0, 1).astype(np.float32),
                       instances, sample.seed, heights)
