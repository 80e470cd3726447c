# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""pyramid.py: image pyramids and the shared-weight projection modules.

A pyramid holds resized copies of one image, each zero-padded at the bottom
and right to a multiple of the projection stride. The content size of every
level is kept so that coordinates can be normalised to the unpadded area
(the valid ratio) and detections can be mapped back to the input frame.

Three interchangeable projections turn a level into a grid of c-dimensional
tokens: flattened linear patches, a strided convolution stack, and a strided
residual stack. The same projection object, and so the same parameters, is
applied to every level.
"""

import abc
import dataclasses
import math
import typing as t

import numpy as np
from skimage.transform import resize

import src.layers as layers
import src.settings as settings
import src.tensor as tensor
from src.tensor import Tensor


@dataclasses.dataclass
class PyramidLevel:
    scale: float
    image: np.ndarray
    """3 x H_k x W_k padded image."""

    content: t.Tuple[int, int]
    """(height, width) of the resized image before padding."""

    @property
    def shape(self) -> t.Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def valid_ratio(self) -> np.ndarray:
        """(x, y) fraction of the padded level covered by content."""
        return np.array([self.content[1] / self.image.shape[2],
                         self.content[0] / self.image.shape[1]])


@dataclasses.dataclass
class ImagePyramid:
    levels: t.List[PyramidLevel]
    source_size: t.Tuple[int, int]
    """(height, width) of the image the pyramid was built from."""

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, k: int) -> PyramidLevel:
        return self.levels[k]


def _pad_to(image: np.ndarray, multiple: int) -> np.ndarray:
    _, height, width = image.shape
    pad_h = -height % multiple
    pad_w = -width % multiple
    if not pad_h and not pad_w:
        return image
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 3 x H x W image."""
    if image.shape[1:] == (height, width):
        return image.copy()
    out = resize(image.transpose(1, 2, 0), (height, width), order=1, mode="edge",
                 anti_aliasing=False, preserve_range=True)
    return out.transpose(2, 0, 1).astype(image.dtype)


def build_pyramid(image: np.ndarray, scales: t.Sequence[float] = (0.5, 1.0, 2.0),
                  stride: int = 16) -> ImagePyramid:
    """
    Resize an image by each scale factor and pad every level with zeros up to
    a multiple of stride.

    Args:
      image: 3 x H x W image.
      scales: pyramid scale factors, smallest first by convention.
      stride: the padded dimensions are multiples of this.
    """
    _, height, width = image.shape
    levels = []
    for s in scales:
        h = max(1, int(round(s * height)))
        w = max(1, int(round(s * width)))
        levels.append(PyramidLevel(float(s), _pad_to(resize_image(image, h, w), stride), (h, w)))
    return ImagePyramid(levels, (height, width))


class ProjectedLevel(t.NamedTuple):
    tokens: Tensor
    """n x c tokens in row-major grid order."""

    grid: t.Tuple[int, int]
    early_map: t.Optional[Tensor]
    """Activations of the stem, C0 x H/2 x W/2, when the projection has one."""

    stage_maps: t.List[Tensor]
    """Outputs of the strided blocks, C x h x w each."""


def map_to_tokens(feature_map: Tensor) -> Tensor:
    """C x h x w map to h*w x C tokens."""
    c, h, w = feature_map.shape
    return tensor.reshape(tensor.transpose(feature_map, (1, 2, 0)), (h * w, c))


def tokens_to_map(tokens: Tensor, grid: t.Tuple[int, int]) -> Tensor:
    h, w = grid
    return tensor.transpose(tensor.reshape(tokens, (h, w, tokens.shape[1])), (2, 0, 1))


def stage_widths(dim: int, n_blocks: int) -> t.List[int]:
    """Stem width followed by the output width of each strided block."""
    base = max(1, dim // 4)
    widths = [base] + [min(dim, base * 2 ** i) for i in range(1, n_blocks + 1)]
    widths[-1] = dim
    return widths


class Projection(layers.Module):
    """Maps a padded pyramid level to a token grid."""

    stride = 16
    """Total downsampling from level pixels to tokens."""

    has_early_map = False

    @abc.abstractmethod
    def __call__(self, image: np.ndarray) -> ProjectedLevel:
        """
        Args:
          image: 3 x H x W level with H, W divisible by stride.
        """

    def _check(self, image: np.ndarray):
        if image.shape[1] % self.stride or image.shape[2] % self.stride:
            raise tensor.ShapeError("level of {}x{} is not divisible by stride {}"
                                    .format(image.shape[1], image.shape[2], self.stride))


class LinearPatchProjection(Projection):
    """
    Flattened P x P patches, in channel, row, column order, mapped to c by
    one linear layer.
    """

    def __init__(self, dim: int, patch_size: int, rng: np.random.Generator):
        self.patch_size = patch_size
        self.stride = patch_size
        self.embed = layers.Linear(3 * patch_size * patch_size, dim, rng)

    def patches(self, image: np.ndarray) -> np.ndarray:
        p = self.patch_size
        channels, height, width = image.shape
        h, w = height // p, width // p
        blocks = image.reshape(channels, h, p, w, p).transpose(1, 3, 0, 2, 4)
        return blocks.reshape(h * w, channels * p * p)

    def __call__(self, image: np.ndarray) -> ProjectedLevel:
        self._check(image)
        grid = (image.shape[1] // self.patch_size, image.shape[2] // self.patch_size)
        return ProjectedLevel(self.embed(self.patches(image)), grid, None, [])


class Stem(layers.Module):
    """conv3x3 stride 2, layer-norm over channels, relu."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator):
        self.conv = layers.Conv2d(dim_in, dim_out, 3, rng, stride=2)
        self.norm = layers.LayerNorm(dim_out)

    def __call__(self, x) -> Tensor:
        return tensor.relu(self.norm.channels(self.conv(x)))


class ResidualBlock(layers.Module):
    """
    out = skip(x) + gamma * branch(x), where skip is a strided 1x1 conv and
    branch is conv3x3 s2 -> LN -> relu -> conv3x3 -> LN.
    """

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator):
        self.skip = layers.Conv2d(dim_in, dim_out, 1, rng, stride=2)
        self.conv1 = layers.Conv2d(dim_in, dim_out, 3, rng, stride=2)
        self.norm1 = layers.LayerNorm(dim_out)
        self.conv2 = layers.Conv2d(dim_out, dim_out, 3, rng)
        self.norm2 = layers.LayerNorm(dim_out)
        self.gamma = tensor.parameter(np.ones(dim_out))

    def __call__(self, x) -> Tensor:
        branch = tensor.relu(self.norm1.channels(self.conv1(x)))
        branch = self.norm2.channels(self.conv2(branch))
        gamma = tensor.reshape(self.gamma, (self.gamma.shape[0], 1, 1))
        return self.skip(x) + gamma * branch


class _StridedProjection(Projection):
    has_early_map = True

    def __init__(self, dim: int, n_blocks: int, rng: np.random.Generator):
        widths = stage_widths(dim, n_blocks)
        self.n_blocks = n_blocks
        self.stride = 2 ** (n_blocks + 1)
        self.stem = Stem(3, widths[0], rng)
        self.blocks = [self._block(widths[i], widths[i + 1], rng) for i in range(n_blocks)]

    @abc.abstractmethod
    def _block(self, dim_in: int, dim_out: int, rng: np.random.Generator) -> layers.Module:
        pass

    def __call__(self, image: np.ndarray) -> ProjectedLevel:
        self._check(image)
        early = self.stem(Tensor(image))
        x = early
        stages = []
        for block in self.blocks:
            x = block(x)
            stages.append(x)
        return ProjectedLevel(map_to_tokens(x), x.shape[1:], early, stages)


class ConvBlock(Stem):
    """Same layout as the stem: conv3x3 stride 2, LN, relu."""


class ConvProjection(_StridedProjection):
    def _block(self, dim_in, dim_out, rng):
        return ConvBlock(dim_in, dim_out, rng)


class ResidualProjection(_StridedProjection):
    def _block(self, dim_in, dim_out, rng):
        return ResidualBlock(dim_in, dim_out, rng)


def make_projection(kind: str, dim: int, rng: np.random.Generator,
                    res_blocks: int = 3, patch_size: int = 16) -> Projection:
    """
    Raises:
      settings.ConfigError: unknown projection kind.
    """
    if kind == "lp":
        return LinearPatchProjection(dim, patch_size, rng)
    if kind == "conv":
        return ConvProjection(dim, res_blocks, rng)
    if kind == "res":
        return ResidualProjection(dim, res_blocks, rng)
    raise settings.ConfigError("unknown projection '{}'".format(kind))


@dataclasses.dataclass
class LevelFeatures:
    tokens: Tensor
    grid: t.Tuple[int, int]
    valid_ratio: np.ndarray
    scale: float
    stride: int
    """Level pixels per token."""

    early_map: t.Optional[Tensor] = None

    @property
    def size(self) -> int:
        return self.grid[0] * self.grid[1]


ScaleFeatures = t.List[LevelFeatures]


def project_pyramid(pyramid: ImagePyramid, projection: Projection) -> ScaleFeatures:
    """Apply one projection to every level of the pyramid."""
    out = []
    for level in pyramid:
        projected = projection(level.image)
        out.append(LevelFeatures(projected.tokens, tuple(projected.grid), level.valid_ratio,
                                 level.scale, projection.stride, projected.early_map))
    return out


def feature_levels(pyramid: ImagePyramid, projection: Projection) -> ScaleFeatures:
    """
    Single-scale aggregation: the last two stage maps of a strided projection
    applied to the first pyramid level become the encoder levels.

    Raises:
      settings.ConfigError: the projection is not residual with at least
        three blocks, so the last two stages would differ in width.
    """
    if not isinstance(projection, ResidualProjection) or projection.n_blocks < 3:
        raise settings.ConfigError("feature aggregation needs projection = res "
                                   "with res_blocks >= 3")
    level = pyramid[0]
    projected = projection(level.image)
    out = []
    for stage, stride in zip(projected.stage_maps[-2:],
                             (projection.stride // 2, projection.stride)):
        out.append(LevelFeatures(map_to_tokens(stage), tuple(stage.shape[1:]), level.valid_ratio,
                                 level.scale, stride, projected.early_map))
    return out


def pad_multiple(projection_stride: int) -> int:
    """Padding granularity of pyramid levels; keeps the stride-4 text embedding exact."""
    return projection_stride * 4 // math.gcd(projection_stride, 4)
