# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""fileparse.py: parse images, annotation files and dataset directories"""

import abc
import logging
import os
import typing as t

import numpy as np

import src.geometry as geometry


class DataError(Exception):
    """Dataset content is missing, corrupt or inconsistent."""


class ParseError(DataError):
    """
    A malformed line of an input file.

    Args:
      path: the file being parsed.
      lineno: 1-based line number of the offending line.
      message: what is wrong with it.
    """

    def __init__(self, path: str, lineno: int, message: str):
        super().__init__("{}: line {}: {}".format(path, lineno, message))
        self.path = path
        self.lineno = lineno


class FileParser(abc.ABC):
    def __init__(self, path: str):
        """
        Args:
          path: location of the file to parse.
        """
        self._path = path
        """path: location of the file to parse."""

    @abc.abstractmethod
    def parse(self) -> object:
        """
        Parses the file and returns its parser-specific content.
        """


class PolygonFileParser(FileParser):
    """
    Parses annotation files, one polygon per line as "x1,y1,...,xn,yn".

    Args:
      path: annotation file.
      scored: lines carry a trailing confidence, as in detection files.
    """

    def __init__(self, path: str, scored: bool = False):
        super().__init__(path)
        self.scored = scored

    def parse(self) -> t.List[t.Union[geometry.Polygon, t.Tuple[geometry.Polygon, float]]]:
        """
        Returns:
          the polygons, paired with their scores when scored is set.

        Raises:
          ParseError: a line has a bad coordinate count or a non-numeric field.
        """
        entries = []
        with open(self._path) as f:
            for i, line in enumerate(f):
                if not line.strip():
                    continue
                entries.append(self.parse_line(line, i + 1))
        return entries

    def parse_line(self, line: str, lineno: int):
        fields = [x.strip() for x in line.strip().split(",")]
        score = None
        try:
            if self.scored:
                score = float(fields.pop())
            coords = [int(x) for x in fields]
        except (ValueError, IndexError):
            logging.debug("Line %s: invalid polygon:\n   %s", lineno, line.rstrip())
            raise ParseError(self._path, lineno, "non-integer coordinate in {!r}"
                             .format(line.strip()))
        if len(coords) % 2 or len(coords) < 6:
            logging.debug("Line %s: invalid polygon:\n   %s", lineno, line.rstrip())
            raise ParseError(self._path, lineno, "expected an even count of at least 6 "
                             "coordinates, got {}".format(len(coords)))
        try:
            polygon = geometry.Polygon(np.array(coords).reshape(-1, 2))
        except geometry.GeometryError as e:
            raise ParseError(self._path, lineno, str(e))
        return polygon if not self.scored else (polygon, score)


class PPMParser(FileParser):
    """Parses binary P6 images with maxval 255 into 3 x H x W floats in [0, 1]."""

    def parse(self) -> np.ndarray:
        with open(self._path, "rb") as f:
            raw = f.read()
        tokens = []
        pos, lineno = 0, 1
        while len(tokens) < 4:
            if pos >= len(raw):
                raise ParseError(self._path, lineno, "truncated PPM header")
            ch = raw[pos:pos + 1]
            if ch == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end
            elif ch.isspace():
                lineno += ch == b"\n"
                pos += 1
            else:
                start = pos
                while pos < len(raw) and not raw[pos:pos + 1].isspace():
                    pos += 1
                tokens.append((raw[start:pos].decode("ascii", "replace"), lineno))
        if tokens[0][0] != "P6":
            raise ParseError(self._path, tokens[0][1], "expected magic P6, got {}"
                             .format(tokens[0][0]))
        try:
            width, height, maxval = (int(tok) for tok, _ in tokens[1:])
        except ValueError:
            raise ParseError(self._path, tokens[-1][1], "non-integer size in PPM header")
        if maxval != 255:
            raise ParseError(self._path, tokens[3][1], "maxval must be 255, got {}".format(maxval))
        pos += 1
        payload = raw[pos:pos + width * height * 3]
        if len(payload) != width * height * 3:
            raise ParseError(self._path, lineno, "PPM payload is truncated")
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
        return (pixels.transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_image_ppm(path: str) -> np.ndarray:
    return PPMParser(path).parse()


def read_image(path: str) -> np.ndarray:
    """Read a PPM, or any format scikit-image can load, as 3 x H x W in [0, 1]."""
    if path.lower().endswith(".ppm"):
        return read_image_ppm(path)
    from skimage import io
    pixels = io.imread(path)
    if pixels.ndim == 2:
        pixels = np.stack([pixels] * 3, axis=-1)
    pixels = pixels[..., :3]
    scale = 255.0 if pixels.dtype == np.uint8 else 1.0
    return (pixels.transpose(2, 0, 1) / scale).astype(np.float32)


def read_annotations(path: str) -> t.List[geometry.Polygon]:
    return PolygonFileParser(path).parse()


def read_detections(path: str) -> t.List[t.Tuple[geometry.Polygon, float]]:
    return PolygonFileParser(path, scored=True).parse()


def read_manifest(split_dir: str) -> t.List[str]:
    """
    Raises:
      DataError: the split has no manifest.txt.
    """
    path = os.path.join(split_dir, "manifest.txt")
    if not os.path.isfile(path):
        raise DataError("{}: missing manifest.txt".format(split_dir))
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


class DatasetItem(t.NamedTuple):
    ident: str
    image: np.ndarray
    polygons: t.List[geometry.Polygon]


def load_split(split_dir: str) -> t.List[DatasetItem]:
    """
    Load every image and ground truth listed in a split's manifest.

    Raises:
      DataError: a listed image or annotation file does not exist.
    """
    items = []
    for ident in read_manifest(split_dir):
        image_path = os.path.join(split_dir, "images", ident + ".ppm")
        gt_path = os.path.join(split_dir, "gts", ident + ".txt")
        for path in (image_path, gt_path):
            if not os.path.isfile(path):
                raise DataError("{}: listed in manifest but {} is missing".format(ident, path))
        items.append(DatasetItem(ident, read_image_ppm(image_path), read_annotations(gt_path)))
    logging.info("Loaded %s samples from %s.", len(items), split_dir)
    return items


SIDE_FILES = ("manifest.txt", "run_config.txt", "report.txt")
"""Text files written next to polygon files that hold no polygons."""


def read_polygon_dir(directory: str, scored: bool) -> t.Dict[str, list]:
    """Map file stem to parsed content for every polygon .txt file in directory."""
    if not os.path.isdir(directory):
        raise DataError("{}: not a directory".format(directory))
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".txt") and name not in SIDE_FILES:
            out[name[:-4]] = PolygonFileParser(os.path.join(directory, name), scored).parse()
    return out
