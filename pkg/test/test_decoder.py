# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

import numpy as np
import pytest

import src.decoder as decoder
import src.encoder as encoder
import src.layers as layers
import src.pyramid as pyramid
import src.tensor as tensor
from src.tensor import Tensor


@pytest.fixture(params=[0, 1])
def rng(request):
    return np.random.default_rng(request.param)


def embedding(tokens, grid):
    return encoder.TextEmbedding(Tensor(tokens), grid, np.array([1.0, 1.0]), 1.0)


def identity_attention(dim, rng):
    attn = decoder.MultiHeadAttention(dim, 1, rng)
    for proj in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
        proj.weight.data[...] = np.eye(dim)
        proj.bias.data[...] = 0.0
    return attn


def level(grid):
    return pyramid.LevelFeatures(None, grid, np.array([1.0, 1.0]), 1.0, 16)


def setup_decoder(rng, n_layers=3, dim=8, n_queries=4):
    """Random encoded levels of grids 2x2, 4x4, 1x1 and an 8x8 embedding."""
    grids = [(2, 2), (4, 4), (1, 1)]
    features = [pyramid.LevelFeatures(Tensor(rng.normal(size=(h * w, dim))), (h, w),
                                      np.array([1.0, 1.0]), 1.0, 16) for h, w in grids]
    encoded = [f.tokens for f in features]
    emb = embedding(rng.normal(size=(64, dim)), (8, 8))
    dec = decoder.Decoder(dim, 3, n_layers, 2, rng)
    queries = decoder.QuerySet(n_queries, dim, rng)
    return dec, encoded, features, emb, queries


class TestMaskHead:
    def test_zero_embedding(self, rng):
        mlp = layers.MLP3(4, rng)
        logits = decoder.predict_masks(embedding(np.zeros((6, 4)), (2, 3)),
                                       Tensor(rng.normal(size=(5, 4))), mlp)
        assert logits.shape == (5, 2, 3)
        assert np.all(logits.data == 0)
        assert np.all(tensor.sigmoid(logits).data == 0.5)

    def test_hand_loop(self, float64, rng):
        mlp = layers.MLP3(4, rng)
        e = rng.normal(size=(4, 4))
        q = Tensor(rng.normal(size=(1, 4)))
        logits = decoder.predict_masks(embedding(e, (2, 2)), q, mlp).data
        kernel = mlp(q).data[0]
        for i in range(2):
            for j in range(2):
                expected = sum(e[i * 2 + j, c] * kernel[c] for c in range(4))
                assert logits[0, i, j] == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_scaling_keeps_signs(self, rng):
        mlp = layers.MLP3(4, rng)
        emb = embedding(rng.normal(size=(9, 4)), (3, 3))
        q = Tensor(rng.normal(size=(3, 4)))
        before = decoder.predict_masks(emb, q, mlp).data
        mlp.layers[-1].weight.data *= 2
        mlp.layers[-1].bias.data *= 2
        after = decoder.predict_masks(emb, q, mlp).data
        assert np.allclose(after, 2 * before, rtol=1e-5, atol=1e-6)
        assert np.array_equal(after > 0, before > 0)

    def test_width_mismatch(self, rng):
        with pytest.raises(tensor.ShapeError):
            decoder.predict_masks(embedding(np.zeros((4, 8)), (2, 2)),
                                  Tensor(np.zeros((1, 4))), layers.MLP3(4, rng))

    def test_idempotent(self, rng):
        mlp = layers.MLP3(4, rng)
        emb = embedding(rng.normal(size=(9, 4)), (3, 3))
        q = Tensor(rng.normal(size=(3, 4)))
        assert np.array_equal(decoder.predict_masks(emb, q, mlp).data,
                              decoder.predict_masks(emb, q, mlp).data)


class TestClassify:
    def test_zero_weights(self, rng):
        head = layers.Linear(4, 1, rng, zero_init=True)
        p = decoder.classify(Tensor(rng.normal(size=(6, 4))), head)
        assert p.shape == (6,)
        assert np.all(p.data == 0.5)

    def test_logit_four(self, rng):
        head = layers.Linear(1, 1, rng, zero_init=True)
        head.bias.data[...] = 4.0
        assert decoder.classify(Tensor(np.zeros((1, 1))), head).data[0] == \
            pytest.approx(0.982, abs=1e-3)

    def test_gradient(self, gradcheck):
        rng = np.random.default_rng(0)
        head = layers.Linear(4, 1, rng)
        q = tensor.parameter(rng.normal(size=(5, 4)))
        gradcheck(lambda: tensor.tsum(decoder.classify(q, head) * np.arange(5.0)),
                  [q, head.weight, head.bias])


class TestMaskedAttention:
    def test_all_foreground_is_plain(self, rng):
        attn = decoder.MultiHeadAttention(8, 2, rng)
        q, tokens = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))
        plain = attn(q, tokens, tokens).data
        open_mask = np.zeros((3, 5), dtype=bool)
        assert np.array_equal(decoder.masked_attention(attn, q, 0.0, tokens, 0.0, open_mask).data,
                              plain)

    def test_single_token(self, rng):
        attn = identity_attention(4, rng)
        q, tokens = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(6, 4)))
        blocked = np.ones((2, 6), dtype=bool)
        blocked[0, 3] = False
        blocked[1, 5] = False
        out = decoder.masked_attention(attn, q, 0.0, tokens, 0.0, blocked).data
        assert np.allclose(out[0], tokens.data[3], atol=1e-6)
        assert np.allclose(out[1], tokens.data[5], atol=1e-6)

    def test_attention_mask_threshold(self):
        logits = np.full((2, 4, 4), -5.0)
        logits[0, :2, :2] = 5.0
        blocked = decoder.attention_mask(Tensor(logits), embedding(np.zeros((16, 4)), (4, 4)),
                                         level((2, 2)))
        assert blocked.shape == (2, 4)
        assert blocked[0].tolist() == [False, True, True, True]

    def test_empty_mask_fallback(self, rng):
        logits = np.full((1, 4, 4), -5.0)
        emb = embedding(np.zeros((16, 4)), (4, 4))
        blocked = decoder.attention_mask(Tensor(logits), emb, level((2, 2)))
        assert not blocked.any()
        attn = decoder.MultiHeadAttention(4, 1, rng)
        q, tokens = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(4, 4)))
        assert np.array_equal(decoder.masked_attention(attn, q, 0.0, tokens, 0.0, blocked).data,
                              attn(q, tokens, tokens).data)


class TestDecoder:
    def test_schedule(self, rng):
        assert decoder.Decoder(8, 3, 9, 2, rng).schedule() == [0, 1, 2, 0, 1, 2, 0, 1, 2]
        assert decoder.Decoder(8, 2, 3, 2, rng).schedule() == [0, 1, 0]

    def test_no_layers(self, rng):
        dec, encoded, features, emb, queries = setup_decoder(rng, n_layers=0)
        out = dec(encoded, features, emb, queries)
        assert len(out.stages) == 1
        assert out.aux == []
        assert out.mask_logits.shape == (4, 8, 8)

    def test_stages(self, rng):
        dec, encoded, features, emb, queries = setup_decoder(rng)
        before = emb.tokens.data.copy()
        out = dec(encoded, features, emb, queries)
        assert len(out.stages) == 4 and len(out.aux) == 3
        assert out.class_logits.shape == (4,)
        assert np.all((out.class_prob > 0) & (out.class_prob < 1))
        for a, b in zip(out.stages, out.stages[1:]):
            assert np.linalg.norm(b.mask_logits.data - a.mask_logits.data) > 0
        assert np.array_equal(emb.tokens.data, before)

    def test_query_permutation(self, float64, rng):
        dec, encoded, features, emb, queries = setup_decoder(rng)
        out = dec(encoded, features, emb, queries)
        perm = np.array([2, 0, 3, 1])
        queries.features.data[...] = queries.features.data[perm]
        queries.pos.data[...] = queries.pos.data[perm]
        permuted = dec(encoded, features, emb, queries)
        assert np.allclose(permuted.mask_logits.data, out.mask_logits.data[perm], atol=1e-9)
        assert np.allclose(permuted.class_logits.data, out.class_logits.data[perm], atol=1e-9)

    def test_gradient(self, gradcheck):
        rng = np.random.default_rng(0)
        dec, encoded, features, emb, queries = setup_decoder(rng, n_layers=2, n_queries=3)
        target = rng.normal(size=(3, 8, 8))
        params = dec.parameters() + queries.parameters()

        def loss():
            out = dec(encoded, features, emb, queries)
            return tensor.tsum(out.mask_logits * target) + tensor.tsum(out.class_logits)
        gradcheck(loss, params, tol=1e-4, max_checks=3)
