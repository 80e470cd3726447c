# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""ablation.py: train and evaluate configuration variants side by side.

Every variant is a set of setting overrides applied on top of the current
settings. Each variant is trained for ablate_steps steps on the training
split and evaluated on the test split; variants with identical overrides
share one trained model.
"""

import logging
import os
import typing as t

import src.evaluation as evaluation
import src.exporter as exporter
import src.fileparse as fileparse
import src.model as model
import src.postprocess as postprocess
import src.settings as settings
import src.trainer as trainer

LATE_FUSION_IOU = 0.5
"""Overlap above which late fusion suppresses the less confident detection."""


class Variant(t.NamedTuple):
    label: str
    overrides: str
    """Settings in the "key1=value1, key2=value2" override format."""

    fusion: t.Tuple[float, ...] = ()
    """Input scale factors for late fusion; empty for a single inference pass."""


MODES = {
    "single-vs-multi": [
        Variant("{1}", "scales=1"),
        Variant("{1/2,1}", "scales=0.5,1"),
        Variant("{1,2}", "scales=1,2"),
        Variant("{1/2,1,2}", "scales=0.5,1,2"),
    ],
    "late-fusion": [
        Variant("I1+I2 late fusion", "scales=1", (0.5, 1.0)),
        Variant("I2+I3 late fusion", "scales=1", (1.0, 2.0)),
        Variant("I1+I2+I3 late fusion", "scales=1", (0.5, 1.0, 2.0)),
        Variant("ATTR {1/2,1,2}", "scales=0.5,1,2"),
    ],
    "projection": [
        Variant("linear patch", "projection=lp, text_embedding_source=auto"),
        Variant("conv", "projection=conv, res_blocks=3, text_embedding_source=auto"),
        Variant("res x2", "projection=res, res_blocks=2, text_embedding_source=auto"),
        Variant("res x3", "projection=res, res_blocks=3, text_embedding_source=auto"),
        Variant("res x4", "projection=res, res_blocks=4, text_embedding_source=auto"),
    ],
    "decoders": [Variant("{} decoders".format(n), "num_decoders={}".format(n))
                 for n in (0, 3, 6, 9)],
    "encoder": [
        Variant("transformer", "encoder=transformer"),
        Variant("conv", "encoder=conv"),
    ],
    "aggregation": [
        Variant("pyramid {1,2}", "aggregation=pyramid, scales=1,2"),
        Variant("feature", "aggregation=feature, projection=res, res_blocks=3"),
    ],
}


def late_fusion_detect(detector: model.ATTR, image, factors: t.Sequence[float],
                       cfg: postprocess.PostprocessConfig = None) -> postprocess.DetectionResult:
    """
    Run the detector once per input scale factor, pool the detections in the
    input frame and suppress overlapping ones.
    """
    _, height, width = image.shape
    base = settings.infer_short_side or min(height, width)
    pooled = []
    for factor in factors:
        pooled.extend(postprocess.detect(detector, image, max(1, int(round(factor * base))), cfg))
    return postprocess.polygon_nms(pooled, LATE_FUSION_IOU, settings.raster_res)


def evaluate_variant(variant: Variant, detector: model.ATTR,
                     test_items: t.Sequence[fileparse.DatasetItem]) -> evaluation.EvalReport:
    dets, gts = {}, {}
    for item in test_items:
        if variant.fusion:
            result = late_fusion_detect(detector, item.image, variant.fusion)
        else:
            result = postprocess.detect(detector, item.image)
        dets[item.ident] = result.scored()
        gts[item.ident] = item.polygons
    return evaluation.evaluate(dets, gts, settings.iou_thresh, settings.raster_res)


def run_ablation(mode: str, train_items: t.Sequence[fileparse.DatasetItem],
                 test_items: t.Sequence[fileparse.DatasetItem], out_dir: str,
                 steps: int = None) -> t.List[t.Dict[str, object]]:
    """
    Train and evaluate every variant of an ablation mode.

    Args:
      mode: one of MODES.
      out_dir: receives one training directory per distinct variant.
      steps: training steps per variant; defaults to the ablate_steps setting.

    Returns:
      one table row per variant.

    Raises:
      settings.ConfigError: the mode is unknown or a variant cannot be built.
    """
    if mode not in MODES:
        raise settings.ConfigError("unknown ablation mode {}; expected one of {}"
                                   .format(mode, ", ".join(MODES)))
    steps = settings.ablate_steps if steps is None else steps
    trained = {}
    rows = []
    for variant in MODES[mode]:
        settings.save()
        try:
            settings.set_from_pairs(variant.overrides)
            settings.validate()
            if variant.overrides not in trained:
                run_dir = os.path.join(out_dir, "variant_{}".format(len(trained)))
                logging.info("Training variant '%s' (%s) for %s steps.",
                             variant.label, variant.overrides, steps)
                trained[variant.overrides] = trainer.train(train_items, run_dir, steps)
            report = evaluate_variant(variant, trained[variant.overrides], test_items)
        finally:
            settings.restore()
        logging.info("Variant '%s': P %.4f R %.4f F %.4f",
                     variant.label, report.precision, report.recall, report.f_measure)
        rows.append({"variant": variant.label, "precision": report.precision,
                     "recall": report.recall, "f-measure": report.f_measure,
                     "tiou-f": report.tiou_f})
    return rows


def ablation_table(mode: str, rows: t.Sequence[t.Mapping[str, object]]) -> exporter.TableExporter:
    return exporter.TableExporter(rows, title="ablation: {}".format(mode))
