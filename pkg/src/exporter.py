# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""exporter.py: write images, polygons, reports and gradient graphs"""

import abc
import csv
import logging
import os
import typing as t

import numpy as np
from termcolor import colored

import src.evaluation as evaluation
import src.geometry as geometry
import src.tensor as tensor


class Exporter(abc.ABC):
    def __init__(self, source: object):
        """
        Args:
          source: object instance to be exported
        """
        self.source = source

    @abc.abstractmethod
    def export(self, path: str):
        """
        Exports the source object to an implementation-specific format.
        """


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


class PPMExporter(Exporter):
    """
    Writes a 3 x H x W image with values in [0, 1] as a binary P6 PPM.
    """

    def export(self, path: str):
        image = np.asarray(self.source)
        pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
        _, height, width = pixels.shape
        _ensure_parent(path)
        with open(path, "wb") as f:
            f.write("P6\n{} {}\n255\n".format(width, height).encode("ascii"))
            f.write(pixels.transpose(1, 2, 0).tobytes())


class PolygonExporter(Exporter):
    """
    Writes one polygon per line as comma-separated integer coordinates,
    followed by ",score" when scores are given.

    Args:
      polygons: the polygons to write.
      scores: optional confidence per polygon.
    """

    def __init__(self, polygons: t.Sequence[geometry.Polygon],
                 scores: t.Sequence[float] = None):
        super().__init__(polygons)
        self.scores = scores

    def export(self, path: str):
        _ensure_parent(path)
        skipped = 0
        with open(path, "w") as f:
            writer = csv.writer(f, lineterminator="\n")
            for i, polygon in enumerate(self.source):
                coords = np.round(polygon.vertices).astype(np.int64)
                try:
                    geometry.Polygon(coords)
                except geometry.GeometryError:
                    skipped += 1
                    continue
                row = [str(v) for v in coords.reshape(-1)]
                if self.scores is not None:
                    row.append("{:.6f}".format(self.scores[i]))
                writer.writerow(row)
        if skipped:
            logging.debug("Skipped %s polygons that vanish at integer precision in %s.",
                          skipped, path)


class OverlayExporter(Exporter):
    """
    Draws polygon outlines over an image and writes it as PPM.

    Args:
      image: 3 x H x W image in [0, 1].
      polygons: outlines to draw, in image coordinates.
    """

    COLOUR = np.array([1.0, 0.1, 0.1])

    def __init__(self, image: np.ndarray, polygons: t.Sequence[geometry.Polygon]):
        super().__init__(image)
        self.polygons = polygons

    def export(self, path: str):
        from skimage.draw import polygon_perimeter
        canvas = np.array(self.source, dtype=np.float32, copy=True)
        for polygon in self.polygons:
            v = polygon.vertices - 0.5
            rr, cc = polygon_perimeter(v[:, 1], v[:, 0], shape=canvas.shape[1:], clip=True)
            canvas[:, rr, cc] = self.COLOUR[:, None]
        PPMExporter(canvas).export(path)


class ReportExporter(Exporter):
    """
    Writes an evaluation report as flat key = value lines and renders it as a
    terminal table.
    """

    def __init__(self, report: evaluation.EvalReport):
        super().__init__(report)

    def export(self, path: str):
        _ensure_parent(path)
        with open(path, "w") as f:
            for key, value in self.source.as_dict().items():
                f.write("{} = {}\n".format(key, value))
        logging.info("Wrote evaluation report to '%s'.", path)

    def table(self) -> str:
        r = self.source
        header = colored("{:<10}{:>11}{:>11}{:>11}".format("protocol", "precision",
                                                           "recall", "f-measure"),
                         attrs=["bold"])
        rows = ["{:<10}{:>11.4f}{:>11.4f}{:>11.4f}".format(
                    "standard", r.precision, r.recall, r.f_measure),
                "{:<10}{:>11.4f}{:>11.4f}{:>11.4f}".format(
                    "tiou", r.tiou_precision, r.tiou_recall, r.tiou_f)]
        footer = "matched IoU {:.4f}".format(r.matched_iou)
        return "\n".join([header] + rows + [footer])


class TableExporter(Exporter):
    """
    Writes rows of named values as an aligned text table.

    Args:
      rows: one mapping per row; the first row's keys name the columns.
      title: heading printed above the table.
    """

    def __init__(self, rows: t.Sequence[t.Mapping[str, object]], title: str = ""):
        super().__init__(rows)
        self.title = title

    @staticmethod
    def _cell(value) -> str:
        return "{:.4f}".format(value) if isinstance(value, float) else str(value)

    def lines(self, colour: bool = False) -> t.List[str]:
        if not self.source:
            return [self.title]
        columns = list(self.source[0].keys())
        widths = [max([len(c)] + [len(self._cell(row[c])) for row in self.source]) + 2
                  for c in columns]
        header = "".join(c.ljust(w) for c, w in zip(columns, widths))
        if colour:
            header = colored(header, attrs=["bold"])
        body = ["".join(self._cell(row[c]).ljust(w) for c, w in zip(columns, widths))
                for row in self.source]
        return ([self.title] if self.title else []) + [header] + body

    def table(self) -> str:
        return "\n".join(self.lines(colour=True))

    def export(self, path: str):
        _ensure_parent(path)
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")
        logging.info("Wrote table to '%s'.", path)


class TapeDotExporter(Exporter):
    """
    Generates a dot file of the operations recorded on a gradient tape.

    Nodes are tensors; edges run from operation inputs to outputs. Nodes are
    coloured by the operation that produced them:
      Green: parameters and other leaves requiring gradients;
      Blue: attention and sampling kernels;
      Orange: convolution and matrix products;
      Purple: normalisation and activations;
      Grey: everything else.
    """

    FAMILIES = {"ms_deform_attn": "blue", "bilinear_sample": "blue", "softmax": "blue",
                "conv2d": "orange", "matmul": "orange", "avg_pool2d": "orange",
                "layer_norm": "purple", "relu": "purple", "sigmoid": "purple",
                "bce": "purple"}

    def __init__(self, tape: tensor.GradTape):
        super().__init__(tape)

    def graph(self):
        import networkx as nx
        G = nx.DiGraph()
        names = {}

        def node(x: tensor.Tensor, label: str, colour: str) -> str:
            key = id(x)
            if key not in names:
                names[key] = "t{}".format(len(names))
                G.add_node(names[key], label="{}\\n{}".format(label, list(x.shape)),
                           color=colour)
            return names[key]

        for entry in self.source.entries:
            for inp in entry.inputs:
                if id(inp) not in names:
                    colour = "green" if inp.requires_grad else "grey"
                    node(inp, inp.name or ("param" if inp.requires_grad else "const"), colour)
            out = node(entry.output, entry.op, self.FAMILIES.get(entry.op, "grey"))
            for inp in entry.inputs:
                G.add_edge(names[id(inp)], out)
        return G

    def export(self, path: str = "tape.dot"):
        """
        Args:
          path: file the DOT text is written to.
        """
        import pydotplus
        G = self.graph()
        dot = pydotplus.Dot(graph_type="digraph")
        for name, attrs in G.nodes(data=True):
            dot.add_node(pydotplus.Node(name, label='"{}"'.format(attrs["label"]),
                                        color=attrs["color"]))
        for u, v in G.edges():
            dot.add_edge(pydotplus.Edge(u, v))
        _ensure_parent(path)
        with open(path, "w") as f:
            f.write(dot.to_string())
        logging.info("Drawing gradient tape of %s operations to '%s'.",
                     len(self.source), path)


def write_image_ppm(path: str, image: np.ndarray):
    PPMExporter(image).export(path)


def write_annotations(path: str, polygons: t.Sequence[geometry.Polygon]):
    PolygonExporter(polygons).export(path)


def write_detections(path: str, polygons: t.Sequence[geometry.Polygon],
                     scores: t.Sequence[float]):
    PolygonExporter(polygons, scores).export(path)
