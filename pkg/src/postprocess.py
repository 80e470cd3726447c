# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""postprocess.py: instance masks to scored polygons, and whole-image inference"""

import dataclasses
import logging
import typing as t

import numpy as np

import src.decoder as decoder
import src.geometry as geometry
import src.model as model
import src.pyramid as pyramid
import src.settings as settings
import src.tensor as tensor
from src.geometry import Polygon


@dataclasses.dataclass(frozen=True)
class PostprocessConfig:
    conf_thresh: float = 0.5
    keep_largest_component: bool = False
    min_component_px: int = 9
    dp_tolerance: float = 1.0

    @classmethod
    def from_settings(cls) -> "PostprocessConfig":
        return cls(**{f.name: settings.get(f.name) for f in dataclasses.fields(cls)})


class Detection(t.NamedTuple):
    polygon: Polygon
    confidence: float
    query: int
    """Index of the query that produced it."""


@dataclasses.dataclass
class DetectionResult:
    detections: t.List[Detection] = dataclasses.field(default_factory=list)
    """Sorted by confidence, highest first."""

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def polygons(self) -> t.List[Polygon]:
        return [d.polygon for d in self.detections]

    @property
    def scores(self) -> t.List[float]:
        return [d.confidence for d in self.detections]

    def scored(self) -> t.List[t.Tuple[Polygon, float]]:
        return [(d.polygon, d.confidence) for d in self.detections]

    def mapped(self, fn: t.Callable[[Polygon], Polygon]) -> "DetectionResult":
        """Apply fn to every polygon, dropping those that degenerate."""
        out = []
        for d in self.detections:
            try:
                out.append(d._replace(polygon=fn(d.polygon)))
            except geometry.GeometryError:
                continue
        return DetectionResult(out)


def score_instance(mask_logits: np.ndarray, class_prob: float) -> float:
    """
    Class probability times the mean foreground probability, where the
    foreground is every cell with probability above 0.5; 0 for an empty mask.
    """
    probs = tensor._sigmoid(np.asarray(mask_logits, dtype=np.float64))
    foreground = probs[probs > 0.5]
    if not foreground.size:
        return 0.0
    return float(class_prob * foreground.mean())


def extract_detections(instances: decoder.TextInstanceSet, meta: model.FrameMeta,
                       cfg: PostprocessConfig = PostprocessConfig()) -> DetectionResult:
    """
    Threshold every query's mask at probability 0.5, outline its connected
    components and map them to input image coordinates. Every component of
    a query carries the query's confidence.
    """
    logits = instances.mask_logits.data
    probs = instances.class_prob
    detections = []
    for q in range(len(logits)):
        confidence = score_instance(logits[q], probs[q])
        if confidence < cfg.conf_thresh or confidence == 0.0:
            continue
        outlines = geometry.trace_contours(logits[q] > 0, cfg.min_component_px, cfg.dp_tolerance)
        if cfg.keep_largest_component and outlines:
            outlines = [max(outlines, key=geometry.polygon_area)]
        for outline in outlines:
            try:
                detections.append(Detection(meta.from_grid(outline), confidence, q))
            except geometry.GeometryError:
                logging.debug("Query %s: component vanished when mapped to the image.", q)
    detections.sort(key=lambda d: -d.confidence)
    return DetectionResult(detections)


def inference_scale(height: int, width: int, short_side: int) -> float:
    """Factor that brings the shorter side to short_side; 1 when short_side is 0."""
    return 1.0 if short_side <= 0 else short_side / min(height, width)


def detect(detector: model.ATTR, image: np.ndarray, short_side: int = None,
           cfg: PostprocessConfig = None) -> DetectionResult:
    """
    Resize the image's shorter side, run the detector without recording
    gradients and return detections in the original image frame.
    """
    short_side = settings.infer_short_side if short_side is None else short_side
    cfg = PostprocessConfig.from_settings() if cfg is None else cfg
    _, height, width = image.shape
    factor = inference_scale(height, width, short_side)
    resized = pyramid.resize_image(image, max(1, int(round(height * factor))),
                                   max(1, int(round(width * factor))))
    with tensor.no_grad():
        output = detector(resized)
    result = extract_detections(output.instances, output.meta, cfg)
    if factor == 1.0:
        return result
    return result.mapped(lambda p: p.scaled(1.0 / factor).clipped(width, height))


def polygon_nms(detections: t.Sequence[Detection], iou_thresh: float = 0.5,
                raster_res: int = 512) -> DetectionResult:
    """Greedy non-maximum suppression: keep the most confident of overlapping detections."""
    order = sorted(detections, key=lambda d: -d.confidence)
    kept = []
    for d in order:
        if all(geometry.polygon_iou(d.polygon, k.polygon, raster_res) < iou_thresh for k in kept):
            kept.append(d)
    return DetectionResult(kept)
