# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""evaluation.py: precision, recall and F-measure, standard and TIoU.

Detections are matched to ground truths greedily in descending confidence:
each detection takes the unused ground truth of highest IoU, if that IoU
reaches the threshold. The TIoU variant weights each match by how completely
the detection covers its ground truth (recall side) and how much of the
detection lies inside it (precision side).
"""

import dataclasses
import math
import typing as t

import src.geometry as geometry
from src.geometry import Polygon

ScoredPolygon = t.Tuple[Polygon, float]


def f_measure(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


class Match(t.NamedTuple):
    det: int
    gt: int
    iou: float


def match_detections(dets: t.Sequence[ScoredPolygon], gts: t.Sequence[Polygon],
                     iou_thresh: float = 0.5, raster_res: int = 512) -> t.List[Match]:
    """One-to-one greedy matching of detections to ground truths, by confidence."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = set()
    matches = []
    for i in order:
        best, best_iou = None, iou_thresh
        for g, gt in enumerate(gts):
            if g in used:
                continue
            iou = geometry.polygon_iou(dets[i][0], gt, raster_res)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = g, iou
        if best is not None:
            used.add(best)
            matches.append(Match(i, best, best_iou))
    return matches


def tiou_terms(det: Polygon, gt: Polygon, iou: float,
               raster_res: int = 512) -> t.Tuple[float, float]:
    """
    Returns:
      (recall term, precision term) = (IoU * |D n G| / |G|, IoU * |D n G| / |D|).
    """
    inside_det, covered_gt = geometry.intersection_fractions(det, gt, raster_res)
    return iou * covered_gt, iou * inside_det


@dataclasses.dataclass
class ImageResult:
    ident: str
    num_dets: int
    num_gts: int
    true_positives: int
    tiou_recall_sum: float
    tiou_precision_sum: float
    matched_iou: float = 0.0
    """Mean IoU of the matched pairs, 0 without matches."""


def evaluate_image(ident: str, dets: t.Sequence[ScoredPolygon], gts: t.Sequence[Polygon],
                   iou_thresh: float = 0.5, raster_res: int = 512) -> ImageResult:
    recall_sum = precision_sum = 0.0
    matches = match_detections(dets, gts, iou_thresh, raster_res)
    for m in matches:
        r, p = tiou_terms(dets[m.det][0], gts[m.gt], m.iou, raster_res)
        recall_sum += r
        precision_sum += p
    return ImageResult(ident, len(dets), len(gts), len(matches), recall_sum, precision_sum,
                       mean_iou(matches))


@dataclasses.dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    tiou_precision: float
    tiou_recall: float
    tiou_f: float
    matched_iou: float = 0.0
    per_image: t.List[ImageResult] = dataclasses.field(default_factory=list)

    @classmethod
    def from_images(cls, results: t.Sequence[ImageResult]) -> "EvalReport":
        dets = sum(r.num_dets for r in results)
        gts = sum(r.num_gts for r in results)
        tp = sum(r.true_positives for r in results)
        precision = tp / dets if dets else 0.0
        recall = tp / gts if gts else 0.0
        t_precision = sum(r.tiou_precision_sum for r in results) / dets if dets else 0.0
        t_recall = sum(r.tiou_recall_sum for r in results) / gts if gts else 0.0
        return cls(precision, recall, f_measure(precision, recall),
                   t_precision, t_recall, f_measure(t_precision, t_recall),
                   sum(r.matched_iou * r.true_positives for r in results) / tp if tp else 0.0,
                   list(results))

    def as_dict(self) -> t.Dict[str, t.Any]:
        """Flat report: the dataset metrics, then per-image counts."""
        out = {k: getattr(self, k) for k in ("precision", "recall", "f_measure",
                                             "tiou_precision", "tiou_recall", "tiou_f",
                                             "matched_iou")}
        for r in self.per_image:
            out["image.{}.dets".format(r.ident)] = r.num_dets
            out["image.{}.gts".format(r.ident)] = r.num_gts
            out["image.{}.tp".format(r.ident)] = r.true_positives
            out["image.{}.matched_iou".format(r.ident)] = r.matched_iou
        return out


def evaluate(dets: t.Mapping[str, t.Sequence[ScoredPolygon]],
             gts: t.Mapping[str, t.Sequence[Polygon]],
             iou_thresh: float = 0.5, raster_res: int = 512) -> EvalReport:
    """
    Evaluate detections against ground truths keyed by image id.

    Raises:
      KeyError: the two mappings do not cover the same ids.
    """
    missing = sorted(set(dets) ^ set(gts))
    if missing:
        raise KeyError("ids present on one side only: {}".format(", ".join(missing)))
    return EvalReport.from_images([evaluate_image(i, dets[i], gts[i], iou_thresh, raster_res)
                                   for i in sorted(gts)])


def _as_mappings(dets, gts):
    if isinstance(gts, t.Mapping):
        return dets, gts
    return ({str(i): d for i, d in enumerate(dets)},
            {str(i): g for i, g in enumerate(gts)})


def evaluate_standard(dets, gts, iou_thresh: float = 0.5,
                      raster_res: int = 512) -> t.Tuple[float, float, float]:
    """
    (P, R, F) over images. dets and gts are either mappings from image id or
    parallel sequences, one entry per image.
    """
    report = evaluate(*_as_mappings(dets, gts), iou_thresh, raster_res)
    return report.precision, report.recall, report.f_measure


def evaluate_tiou(dets, gts, iou_thresh: float = 0.5,
                  raster_res: int = 512) -> t.Tuple[float, float, float]:
    """(TIoU-P, TIoU-R, TIoU-F) on the matches of evaluate_standard."""
    report = evaluate(*_as_mappings(dets, gts), iou_thresh, raster_res)
    return report.tiou_precision, report.tiou_recall, report.tiou_f


def mean_iou(matches: t.Sequence[Match]) -> float:
    """Mean IoU of matched pairs, independent of their order; 0 without matches."""
    return math.fsum(m.iou for m in matches) / len(matches) if matches else 0.0
