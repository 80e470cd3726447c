# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""decoder.py: text queries, scale-wise masked-attention decoders and heads.

Masks are predicted as the dot product of the fixed text embedding E with an
MLP of each query. Decoder stage s reads the encoded tokens of level
s mod L, attending only to tokens inside the query's current mask.
"""

import dataclasses
import typing as t

import numpy as np

import src.encoder as encoder
import src.layers as layers
import src.pyramid as pyramid
import src.tensor as tensor
from src.tensor import Tensor


class QuerySet(layers.Module):
    """N learned query features with N learned query position embeddings."""

    def __init__(self, n_queries: int, dim: int, rng: np.random.Generator):
        self.features = tensor.parameter(rng.normal(size=(n_queries, dim)))
        self.pos = tensor.parameter(rng.normal(size=(n_queries, dim)))

    def __len__(self):
        return self.features.shape[0]


@dataclasses.dataclass
class Prediction:
    mask_logits: Tensor
    """N x h x w logits over the text embedding grid."""

    class_logits: Tensor
    """N text/non-text logits."""

    @property
    def class_prob(self) -> np.ndarray:
        return tensor._sigmoid(self.class_logits.data)


@dataclasses.dataclass
class TextInstanceSet:
    stages: t.List[Prediction]
    """Prediction from the initial queries, then one per decoder stage."""

    @property
    def final(self) -> Prediction:
        return self.stages[-1]

    @property
    def aux(self) -> t.List[Prediction]:
        return self.stages[:-1]

    @property
    def mask_logits(self) -> Tensor:
        return self.final.mask_logits

    @property
    def class_logits(self) -> Tensor:
        return self.final.class_logits

    @property
    def class_prob(self) -> np.ndarray:
        return self.final.class_prob


def predict_masks(embedding: encoder.TextEmbedding, queries: Tensor,
                  mask_embed: layers.MLP3) -> Tensor:
    """
    logits(t, i, j) = <E(i, j), mlp3(Q_t)>.

    Raises:
      tensor.ShapeError: the MLP output width differs from the embedding width.
    """
    h, w = embedding.grid
    kernels = mask_embed(queries)
    if kernels.shape[1] != embedding.tokens.shape[1]:
        raise tensor.ShapeError("query width {} against embedding width {}"
                                .format(kernels.shape[1], embedding.tokens.shape[1]))
    logits = tensor.matmul(kernels, tensor.transpose(embedding.tokens))
    return tensor.reshape(logits, (kernels.shape[0], h, w))


def classify(queries: Tensor, head: layers.Linear) -> Tensor:
    """Text probability of every query."""
    return tensor.sigmoid(tensor.reshape(head(queries), (queries.shape[0],)))


class MultiHeadAttention(layers.Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise tensor.ShapeError("width {} is not divisible by {} heads".format(dim, heads))
        self.heads = heads
        self.q_proj = layers.Linear(dim, dim, rng)
        self.k_proj = layers.Linear(dim, dim, rng)
        self.v_proj = layers.Linear(dim, dim, rng)
        self.out_proj = layers.Linear(dim, dim, rng)

    def _split(self, x: Tensor, axes) -> Tensor:
        n, c = x.shape
        return tensor.transpose(tensor.reshape(x, (n, self.heads, c // self.heads)), axes)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 blocked: np.ndarray = None) -> Tensor:
        """
        Args:
          blocked: optional Nq x Nk boolean array; True removes the key from
            that query's attention. Every row must leave one key open.
        """
        n_q, c = query.shape
        q = self._split(self.q_proj(query), (1, 0, 2))
        k = self._split(self.k_proj(key), (1, 2, 0))
        v = self._split(self.v_proj(value), (1, 0, 2))
        scores = tensor.matmul(q, k) * (1.0 / np.sqrt(c // self.heads))
        if blocked is not None:
            scores = tensor.masked_fill(scores, blocked[None], -np.inf)
        out = tensor.matmul(tensor.softmax(scores, axis=-1), v)
        return self.out_proj(tensor.reshape(tensor.transpose(out, (1, 0, 2)), (n_q, c)))


def attention_mask(mask_logits: Tensor, embedding: encoder.TextEmbedding,
                   level: pyramid.LevelFeatures) -> np.ndarray:
    """
    Resample each query's mask probability to a level grid and threshold it
    at 0.5. A query whose mask is empty on the level attends everywhere.

    Returns:
      N x n_l boolean array, True where attention is blocked.
    """
    probs = tensor._sigmoid(mask_logits.data)
    points = encoder.content_points(level.grid, level.valid_ratio) * embedding.valid_ratio
    with tensor.no_grad():
        sampled = tensor.bilinear_sample(Tensor(probs), points).data
    blocked = (sampled < 0.5).T
    blocked[blocked.all(axis=1)] = False
    return blocked


def masked_attention(attn: MultiHeadAttention, queries: Tensor, query_pos, tokens: Tensor,
                     token_pos, blocked: np.ndarray = None) -> Tensor:
    """Cross-attention from queries to level tokens, restricted by blocked."""
    return attn(queries + query_pos, tokens + token_pos, tokens, blocked)


class DecoderLayer(layers.Module):
    """Pre-norm masked cross-attention, self-attention and feed-forward, each residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.cross_norm = layers.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.self_norm = layers.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ffn_norm = layers.LayerNorm(dim)
        self.ffn = layers.FeedForward(dim, 4 * dim, rng)

    def __call__(self, queries: Tensor, query_pos: Tensor, tokens: Tensor, token_pos,
                 blocked: np.ndarray) -> Tensor:
        queries = queries + masked_attention(self.cross_attn, self.cross_norm(queries),
                                             query_pos, tokens, token_pos, blocked)
        normed = self.self_norm(queries)
        x = normed + query_pos
        queries = queries + self.self_attn(x, x, normed)
        return queries + self.ffn(self.ffn_norm(queries))


class Decoder(layers.Module):
    """
    Scale-wise decoders visiting the levels round robin, followed by the
    shared mask and class heads.

    Args:
      dim: query width c.
      n_levels: number of encoded levels L.
      n_layers: number of decoder stages; 0 predicts from the initial queries.
      heads: attention heads.
    """

    def __init__(self, dim: int, n_levels: int, n_layers: int, heads: int,
                 rng: np.random.Generator):
        self.dim = dim
        self.n_levels = n_levels
        self.level_embed = tensor.parameter(rng.normal(size=(n_levels, dim)))
        self.layers = [DecoderLayer(dim, heads, rng) for _ in range(n_layers)]
        self.norm = layers.LayerNorm(dim)
        self.mask_embed = layers.MLP3(dim, rng)
        self.class_head = layers.Linear(dim, 1, rng)

    def schedule(self) -> t.List[int]:
        """Level index read by each stage."""
        return [s % self.n_levels for s in range(len(self.layers))]

    def predict(self, queries: Tensor, embedding: encoder.TextEmbedding) -> Prediction:
        normed = self.norm(queries)
        logits = tensor.reshape(self.class_head(normed), (queries.shape[0],))
        return Prediction(predict_masks(embedding, normed, self.mask_embed), logits)

    def __call__(self, encoded: t.Sequence[Tensor], features: pyramid.ScaleFeatures,
                 embedding: encoder.TextEmbedding, queries: QuerySet) -> TextInstanceSet:
        q, q_pos = queries.features, queries.pos
        prediction = self.predict(q, embedding)
        stages = [prediction]
        for layer, l in zip(self.layers, self.schedule()):
            level = features[l]
            blocked = attention_mask(prediction.mask_logits, embedding, level)
            token_pos = encoder.sine_pos_embed(level.grid[0], level.grid[1], self.dim) \
                + self.level_embed[l]
            q = layer(q, q_pos, encoded[l], token_pos, blocked)
            prediction = self.predict(q, embedding)
            stages.append(prediction)
        return TextInstanceSet(stages)
