# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""encoder.py: deformable attention encoder and the text embedding.

Sampling locations are (x, y) fractions of a padded level. Reference points
are first expressed relative to the content area of their own grid and then
multiplied by each level's valid ratio, so that levels padded by different
amounts stay aligned.
"""

import dataclasses
import logging
import typing as t

import numpy as np

import src.layers as layers
import src.pyramid as pyramid
import src.settings as settings
import src.tensor as tensor
from src.tensor import Tensor

TEMPERATURE = 10000.0


def sine_pos_embed(height: int, width: int, dim: int,
                   temperature: float = TEMPERATURE) -> np.ndarray:
    """
    Two-dimensional sinusoidal position embedding of an h x w grid.

    The first dim / 2 channels encode the row index and the rest the column
    index, alternating sin and cos over geometrically spaced frequencies.

    Returns:
      h*w x dim array in row-major grid order.

    Raises:
      settings.ConfigError: dim is not divisible by 4.
    """
    if dim % 4:
        raise settings.ConfigError("position embedding width {} is not divisible by 4"
                                   .format(dim))
    half = dim // 2
    i = np.arange(half)
    freq = temperature ** (2 * (i // 2) / half)
    even = i % 2 == 0

    def encode(n: int) -> np.ndarray:
        phase = np.arange(n)[:, None] / freq
        return np.where(even, np.sin(phase), np.cos(phase))

    rows = np.repeat(encode(height), width, axis=0)
    cols = np.tile(encode(width), (height, 1))
    return np.concatenate([rows, cols], axis=1)


def content_points(grid: t.Tuple[int, int], valid_ratio: np.ndarray) -> np.ndarray:
    """Cell centres of a grid as (x, y) fractions of its content area."""
    h, w = grid
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([xs.ravel() / (valid_ratio[0] * w), ys.ravel() / (valid_ratio[1] * h)], axis=1)


def reference_points(points: np.ndarray, valid_ratios: t.Sequence[np.ndarray]) -> np.ndarray:
    """Content fractions n x 2 to per-level padded fractions n x L x 2."""
    return points[:, None, :] * np.stack(valid_ratios)[None]


class MSDeformAttn(layers.Module):
    """
    Multi-scale deformable attention.

    Each query predicts, per head and level, K sampling offsets in level
    pixels and K attention logits. The logits are normalised jointly over
    the L * K samples of a head.

    Args:
      dim: token width c.
      n_levels: number of value levels L.
      heads: number of heads M, dividing dim.
      points: samples per head and level K.
    """

    def __init__(self, dim: int, n_levels: int, heads: int, points: int,
                 rng: np.random.Generator):
        if dim % heads:
            raise tensor.ShapeError("width {} is not divisible by {} heads".format(dim, heads))
        self.n_levels = n_levels
        self.heads = heads
        self.points = points
        self.sampling_offsets = layers.Linear(dim, heads * n_levels * points * 2, rng,
                                              zero_init=True)
        self.sampling_offsets.bias.data[...] = self.offset_grid().reshape(-1)
        self.attention_weights = layers.Linear(dim, heads * n_levels * points, rng,
                                               zero_init=True)
        self.value_proj = layers.Linear(dim, dim, rng)
        self.output_proj = layers.Linear(dim, dim, rng)

    def offset_grid(self) -> np.ndarray:
        """Initial offsets: head m points along angle 2*pi*m/M, sample k at distance k+1."""
        theta = np.arange(self.heads) * (2.0 * np.pi / self.heads)
        grid = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, self.n_levels, self.points, 1))
        return grid * np.arange(1, self.points + 1)[None, None, :, None]

    def sampling(self, query: Tensor, reference: np.ndarray,
                 shapes: t.Sequence[t.Tuple[int, int]]) -> t.Tuple[Tensor, Tensor]:
        """
        Returns:
          locations Nq x M x L x K x 2 and weights Nq x M x L x K.
        """
        n_q = query.shape[0]
        m, l, k = self.heads, self.n_levels, self.points
        offsets = tensor.reshape(self.sampling_offsets(query), (n_q, m, l, k, 2))
        normaliser = np.array([[w, h] for h, w in shapes], dtype=float)[None, None, :, None, :]
        locations = tensor.constant(reference.reshape(n_q, 1, l, 1, 2)) + offsets / normaliser
        logits = tensor.reshape(self.attention_weights(query), (n_q, m, l * k))
        weights = tensor.reshape(tensor.softmax(logits, axis=-1), (n_q, m, l, k))
        return locations, weights

    def __call__(self, query: Tensor, reference: np.ndarray, values: t.Sequence[Tensor],
                 shapes: t.Sequence[t.Tuple[int, int]]) -> Tensor:
        """
        Args:
          query: Nq x c queries, position embedding included.
          reference: Nq x L x 2 reference points per level.
          values: per level, n_l x c tokens.
          shapes: per level grid (h_l, w_l).
        """
        if len(values) != self.n_levels:
            raise tensor.ShapeError("attention built for {} levels, got {}"
                                    .format(self.n_levels, len(values)))
        locations, weights = self.sampling(query, reference, shapes)
        projected = [self.value_proj(v) for v in values]
        return self.output_proj(tensor.ms_deform_attn(projected, shapes, locations, weights))


class EncoderUnit(layers.Module):
    def __init__(self, dim: int, n_levels: int, heads: int, points: int,
                 rng: np.random.Generator):
        self.attn = MSDeformAttn(dim, n_levels, heads, points, rng)
        self.norm = layers.LayerNorm(dim)
        self.ffn = layers.FeedForward(dim, 4 * dim, rng)

    def __call__(self, tokens: Tensor, pos: Tensor, reference: np.ndarray,
                 bounds: t.Sequence[t.Tuple[int, int]],
                 shapes: t.Sequence[t.Tuple[int, int]]) -> Tensor:
        values = [tokens[a:b] for a, b in bounds]
        tokens = tokens + self.attn(tokens + pos, reference, values, shapes)
        return tokens + self.ffn(self.norm(tokens))


def _bounds(sizes: t.Sequence[int]) -> t.List[t.Tuple[int, int]]:
    ends = np.cumsum(sizes)
    return [(int(e - s), int(e)) for s, e in zip(sizes, ends)]


class Encoder(layers.Module):
    """
    Deformable attention encoder over the tokens of every level at once.

    Position embeddings are the sinusoidal embedding of each grid plus a
    learned embedding per level, shared by all units.
    """

    def __init__(self, dim: int, n_levels: int, n_units: int, heads: int, points: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.level_embed = tensor.parameter(rng.normal(size=(n_levels, dim)))
        self.units = [EncoderUnit(dim, n_levels, heads, points, rng) for _ in range(n_units)]

    def position(self, features: pyramid.ScaleFeatures) -> Tensor:
        return tensor.concat([sine_pos_embed(f.grid[0], f.grid[1], self.dim) + self.level_embed[l]
                              for l, f in enumerate(features)], axis=0)

    def __call__(self, features: pyramid.ScaleFeatures) -> t.List[Tensor]:
        """Returns the encoded tokens of each level, shapes unchanged."""
        if not self.units:
            return [f.tokens for f in features]
        bounds = _bounds([f.size for f in features])
        shapes = [f.grid for f in features]
        ratios = [f.valid_ratio for f in features]
        reference = np.concatenate([reference_points(content_points(f.grid, f.valid_ratio), ratios)
                                    for f in features])
        pos = self.position(features)
        tokens = tensor.concat([f.tokens for f in features], axis=0)
        for unit in self.units:
            tokens = unit(tokens, pos, reference, bounds, shapes)
        return [tokens[a:b] for a, b in bounds]


class ConvStack(layers.Module):
    """Residual conv3x3 -> LN -> relu blocks at constant width."""

    def __init__(self, dim: int, n_blocks: int, rng: np.random.Generator):
        self.convs = [layers.Conv2d(dim, dim, 3, rng) for _ in range(n_blocks)]
        self.norms = [layers.LayerNorm(dim) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = x + tensor.relu(norm.channels(conv(x)))
        return x


class ConvEncoder(layers.Module):
    """
    Convolutional alternative to the deformable encoder. Levels are visited
    from the coarsest grid to the finest; each adds the resampled output of
    the previous, coarser level before its own conv stack.
    """

    def __init__(self, dim: int, n_levels: int, n_units: int, rng: np.random.Generator):
        self.stacks = [ConvStack(dim, n_units, rng) for _ in range(n_levels)]

    def __call__(self, features: pyramid.ScaleFeatures) -> t.List[Tensor]:
        order = sorted(range(len(features)), key=lambda l: features[l].size)
        out = [None] * len(features)
        previous = None
        for l in order:
            f = features[l]
            tokens = f.tokens
            if previous is not None:
                coarse, coarse_ratio = previous
                points = content_points(f.grid, f.valid_ratio) * coarse_ratio
                tokens = tokens + tensor.bilinear_sample(coarse, points)
            encoded = self.stacks[l](pyramid.tokens_to_map(tokens, f.grid))
            out[l] = pyramid.map_to_tokens(encoded)
            previous = encoded, f.valid_ratio
        return out


@dataclasses.dataclass
class TextEmbedding:
    tokens: Tensor
    """h*w x c embedding E."""

    grid: t.Tuple[int, int]
    valid_ratio: np.ndarray
    scale: float
    """Scale factor of the pyramid level E was taken from."""

    stride: int = 4
    """Level pixels per embedding cell."""


class TextEmbeddingInit(layers.Module):
    """E = avgpool2(conv1x1(early map)), at stride 4 of the source level."""

    def __init__(self, early_dim: int, dim: int, rng: np.random.Generator):
        self.proj = layers.Conv2d(early_dim, dim, 1, rng)

    def __call__(self, early_map: Tensor, valid_ratio: np.ndarray, scale: float) -> TextEmbedding:
        pooled = tensor.avg_pool2d(self.proj(early_map), 2)
        return TextEmbedding(pyramid.map_to_tokens(pooled), tuple(pooled.shape[1:]),
                             valid_ratio, scale)


class TextEmbeddingUpdate(layers.Module):
    """One deformable attention step from E into the encoded levels, added residually."""

    def __init__(self, dim: int, n_levels: int, heads: int, points: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.attn = MSDeformAttn(dim, n_levels, heads, points, rng)

    def __call__(self, embedding: TextEmbedding, encoded: t.Sequence[Tensor],
                 features: pyramid.ScaleFeatures) -> TextEmbedding:
        h, w = embedding.grid
        pos = sine_pos_embed(h, w, self.dim)
        reference = reference_points(content_points(embedding.grid, embedding.valid_ratio),
                                     [f.valid_ratio for f in features])
        update = self.attn(embedding.tokens + pos, reference, encoded, [f.grid for f in features])
        return dataclasses.replace(embedding, tokens=embedding.tokens + update)


def init_text_embedding(features: pyramid.ScaleFeatures, init: TextEmbeddingInit,
                        stem: t.Optional[pyramid.Stem] = None,
                        image: np.ndarray = None) -> TextEmbedding:
    """
    Initial text embedding from the last (highest resolution) level.

    Args:
      features: projected levels; the last one must carry an early map
        unless stem is given.
      init: the 1x1 projection and pooling.
      stem: dedicated stem run on image when the projection has no early map.
      image: the padded image of the last pyramid level.

    Raises:
      settings.ConfigError: no early map and no stem.
    """
    last = features[-1]
    if stem is not None:
        early = stem(Tensor(image))
    elif last.early_map is not None:
        early = last.early_map
    else:
        raise settings.ConfigError("the projection has no early feature map for the "
                                   "text embedding; use text_embedding_source = stem")
    logging.debug("Text embedding source map %s.", early.shape)
    return init(early, last.valid_ratio, last.scale)
