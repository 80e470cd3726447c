# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""model.py: the assembled detector and its configuration"""

import dataclasses
import typing as t

import numpy as np

import src.decoder as decoder
import src.encoder as encoder
import src.geometry as geometry
import src.layers as layers
import src.pyramid as pyramid
import src.settings as settings
import src.tensor as tensor
from src.rng import Xoshiro256, mix

BACKBONE_PREFIXES = ("projection.", "text_stem.", "encoder.")
"""Parameters under these names train with the backbone learning rate multiplier."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    scales: t.Tuple[float, ...] = (0.5, 1.0, 2.0)
    projection: str = "res"
    res_blocks: int = 3
    embed_dim: int = 64
    patch_size: int = 16
    encoder: str = "transformer"
    encoder_units: int = 6
    heads: int = 8
    msda_points: int = 4
    text_embedding_source: str = "auto"
    aggregation: str = "pyramid"
    num_queries: int = 20
    num_decoders: int = 9
    decoder_heads: int = 8

    @classmethod
    def from_settings(cls) -> "ModelConfig":
        return cls(**{f.name: settings.get(f.name) for f in dataclasses.fields(cls)})

    @property
    def pyramid_scales(self) -> t.Tuple[float, ...]:
        return (1.0,) if self.aggregation == "feature" else tuple(self.scales)

    @property
    def n_levels(self) -> int:
        return 2 if self.aggregation == "feature" else len(self.scales)

    def validate(self):
        """
        Raises:
          settings.ConfigError: the combination cannot be built.
        """
        if self.aggregation == "feature" and (self.projection != "res" or self.res_blocks < 3):
            raise settings.ConfigError("aggregation = feature needs projection = res "
                                       "and res_blocks >= 3")
        if self.projection == "lp" and self.text_embedding_source == "early":
            raise settings.ConfigError("projection = lp has no early feature map; "
                                       "set text_embedding_source to auto or stem")
        if self.embed_dim % 4:
            raise settings.ConfigError("embed_dim must be divisible by 4")
        if self.embed_dim % self.heads or self.embed_dim % self.decoder_heads:
            raise settings.ConfigError("embed_dim must be divisible by the head counts")


class FrameMeta(t.NamedTuple):
    """Relates the text embedding grid to the input image."""

    image_size: t.Tuple[int, int]
    """(height, width) of the input image."""

    scale: float
    """Scale factor of the level the embedding was taken from."""

    stride: int
    grid: t.Tuple[int, int]

    @property
    def cell(self) -> float:
        """Input pixels per embedding cell."""
        return self.stride / self.scale

    def to_grid(self, polygon: geometry.Polygon) -> geometry.Polygon:
        return polygon.scaled(1.0 / self.cell)

    def from_grid(self, polygon: geometry.Polygon) -> geometry.Polygon:
        """
        Raises:
          geometry.GeometryError: nothing of the polygon is left inside the image.
        """
        height, width = self.image_size
        return polygon.scaled(self.cell).clipped(width, height)

    def gt_masks(self, polygons: t.Sequence[geometry.Polygon]) -> np.ndarray:
        """Rasterize ground truths onto the embedding grid, G x h x w."""
        if not polygons:
            return np.zeros((0,) + tuple(self.grid), dtype=bool)
        return np.stack([geometry.rasterize(self.to_grid(p), self.grid) for p in polygons])


class ModelOutput(t.NamedTuple):
    instances: decoder.TextInstanceSet
    embedding: encoder.TextEmbedding
    meta: FrameMeta


class ATTR(layers.Module):
    """
    Image pyramid, shared projection, encoder, text embedding, queries and
    scale-wise decoders.

    Args:
      config: architecture settings.
      rng: source of the initial parameters.

    Raises:
      settings.ConfigError: the configuration cannot be built.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        dim = config.embed_dim
        levels = config.n_levels
        self.projection = pyramid.make_projection(config.projection, dim, rng,
                                                  config.res_blocks, config.patch_size)
        early_dim = pyramid.stage_widths(dim, config.res_blocks)[0]
        self.text_stem = None
        if config.text_embedding_source == "stem" or not self.projection.has_early_map:
            self.text_stem = pyramid.Stem(3, early_dim, rng)
        if config.encoder == "conv":
            self.encoder = encoder.ConvEncoder(dim, levels, config.encoder_units, rng)
        else:
            self.encoder = encoder.Encoder(dim, levels, config.encoder_units, config.heads,
                                           config.msda_points, rng)
        self.text_init = encoder.TextEmbeddingInit(early_dim, dim, rng)
        self.text_update = encoder.TextEmbeddingUpdate(dim, levels, config.heads,
                                                       config.msda_points, rng)
        self.queries = decoder.QuerySet(config.num_queries, dim, rng)
        self.decoder = decoder.Decoder(dim, levels, config.num_decoders,
                                       config.decoder_heads, rng)

    def build_pyramid(self, image: np.ndarray) -> pyramid.ImagePyramid:
        return pyramid.build_pyramid(image, self.config.pyramid_scales,
                                     pyramid.pad_multiple(self.projection.stride))

    def features(self, pyr: pyramid.ImagePyramid) -> pyramid.ScaleFeatures:
        if self.config.aggregation == "feature":
            return pyramid.feature_levels(pyr, self.projection)
        return pyramid.project_pyramid(pyr, self.projection)

    def __call__(self, image: np.ndarray) -> ModelOutput:
        """
        Args:
          image: 3 x H x W image with values in [0, 1].
        """
        pyr = self.build_pyramid(image)
        features = self.features(pyr)
        encoded = self.encoder(features)
        source = pyr[len(pyr) - 1]
        embedding = encoder.init_text_embedding(features, self.text_init, self.text_stem,
                                                source.image)
        embedding = self.text_update(embedding, encoded, features)
        instances = self.decoder(encoded, features, embedding, self.queries)
        meta = FrameMeta(pyr.source_size, embedding.scale, embedding.stride, embedding.grid)
        return ModelOutput(instances, embedding, meta)

    def parameter_groups(self) -> t.Tuple[t.List[t.Tuple[str, tensor.Tensor]],
                                          t.List[t.Tuple[str, tensor.Tensor]]]:
        """Named parameters split into (backbone, heads)."""
        backbone, heads = [], []
        for name, p in self.named_parameters():
            (backbone if name.startswith(BACKBONE_PREFIXES) else heads).append((name, p))
        return backbone, heads


def build_model(config: ModelConfig = None, seed: int = None) -> ATTR:
    """Build a detector from the given or current settings, initialised from seed."""
    config = ModelConfig.from_settings() if config is None else config
    seed = settings.seed if seed is None else seed
    return ATTR(config, Xoshiro256.from_seed(mix(seed, 1)).numpy_generator())
