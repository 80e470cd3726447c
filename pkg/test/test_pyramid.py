# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

import numpy as np
import pytest

import src.pyramid as pyramid
import src.settings as settings
import src.tensor as tensor
from src.tensor import Tensor


@pytest.fixture(params=["lp", "conv", "res"])
def kind(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def random_image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(size=(3, h, w)).astype(np.float32)


class TestBuildPyramid:
    def test_default_scales(self):
        pyr = pyramid.build_pyramid(random_image(64, 64))
        assert [level.shape for level in pyr] == [(32, 32), (64, 64), (128, 128)]
        assert [level.scale for level in pyr] == [0.5, 1.0, 2.0]
        assert pyr.source_size == (64, 64)

    def test_single_scale_is_identity(self):
        image = random_image(48, 64)
        pyr = pyramid.build_pyramid(image, (1.0,))
        assert len(pyr) == 1
        assert np.array_equal(pyr[0].image, image)
        assert np.array_equal(pyr[0].valid_ratio, [1.0, 1.0])

    def test_padding(self):
        pyr = pyramid.build_pyramid(random_image(50, 70), stride=16)
        for level in pyr:
            assert level.shape[0] % 16 == 0 and level.shape[1] % 16 == 0
            h, w = level.content
            assert np.all(level.image[:, h:, :] == 0) and np.all(level.image[:, :, w:] == 0)
        assert pyr[0].content == (25, 35)
        assert pyr[0].shape == (32, 48)
        assert np.allclose(pyr[0].valid_ratio, [35 / 48, 25 / 32])

    def test_pad_multiple(self):
        assert pyramid.pad_multiple(16) == 16
        assert pyramid.pad_multiple(8) == 8
        assert pyramid.pad_multiple(2) == 4


class TestProjections:
    def test_linear_patch_counts(self, rng):
        proj = pyramid.LinearPatchProjection(8, 16, rng)
        out = proj(random_image(32, 32))
        assert out.tokens.shape == (4, 8)
        assert out.grid == (2, 2)
        assert proj.embed.weight.shape == (768, 8)
        assert out.early_map is None

    def test_linear_patch_matches_hand_loop(self, rng):
        proj = pyramid.LinearPatchProjection(8, 4, rng)
        image = random_image(8, 12)
        tokens = proj(image).tokens.data
        w = proj.embed.weight.data
        b = proj.embed.bias.data
        for r in range(2):
            for c in range(3):
                patch = image[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1)
                assert np.allclose(tokens[r * 3 + c], patch @ w + b, atol=1e-5)

    def test_not_divisible(self, rng):
        with pytest.raises(tensor.ShapeError):
            pyramid.LinearPatchProjection(8, 16, rng)(random_image(24, 32))
        with pytest.raises(tensor.ShapeError):
            pyramid.ResidualProjection(8, 3, rng)(random_image(24, 32))

    def test_token_counts_agree(self, rng):
        image = random_image(64, 64)
        counts = {k: pyramid.make_projection(k, 8, rng)(image).tokens.shape for k in
                  ("lp", "conv", "res")}
        assert counts == {"lp": (16, 8), "conv": (16, 8), "res": (16, 8)}

    def test_block_count_changes_stride(self, rng):
        image = random_image(64, 64)
        two = pyramid.ResidualProjection(8, 2, rng)
        three = pyramid.ResidualProjection(8, 3, rng)
        assert (two.stride, three.stride) == (8, 16)
        assert two(image).tokens.shape[0] == 4 * three(image).tokens.shape[0]

    def test_stage_widths(self):
        assert pyramid.stage_widths(64, 3) == [16, 32, 64, 64]
        assert pyramid.stage_widths(64, 2) == [16, 32, 64]
        assert pyramid.stage_widths(64, 4) == [16, 32, 64, 64, 64]

    def test_early_map(self, rng):
        out = pyramid.ResidualProjection(8, 3, rng)(random_image(32, 32))
        assert out.early_map.shape == (2, 16, 16)
        assert [s.shape for s in out.stage_maps] == [(4, 8, 8), (8, 4, 4), (8, 2, 2)]

    def test_zero_gamma_is_skip_path(self, rng):
        block = pyramid.ResidualBlock(4, 8, rng)
        block.gamma.data[...] = 0.0
        x = Tensor(np.random.default_rng(1).normal(size=(4, 8, 8)))
        assert np.allclose(block(x).data, block.skip(x).data)

    def test_unknown_kind(self, rng):
        with pytest.raises(settings.ConfigError):
            pyramid.make_projection("vit", 8, rng)

    def test_brightness_is_linear_before_norm(self, rng):
        proj = pyramid.ResidualProjection(8, 3, rng)
        proj.stem.conv.bias.data[...] = np.arange(2)
        image = random_image(32, 32)
        conv = proj.stem.conv
        bias = conv.bias.data[:, None, None]
        once = conv(Tensor(image)).data - bias
        twice = conv(Tensor(2 * image)).data - bias
        assert np.allclose(twice, 2 * once, atol=1e-5)

    def test_conv_gradient(self, gradcheck):
        proj = pyramid.ConvProjection(8, 2, np.random.default_rng(0))
        image = random_image(16, 16).astype(np.float64)
        target = np.random.default_rng(1).normal(size=(4, 8))
        gradcheck(lambda: tensor.tsum(proj(image).tokens * target), proj.parameters(),
                  max_checks=6)

    def test_res_gradient(self, gradcheck):
        proj = pyramid.ResidualProjection(8, 2, np.random.default_rng(0))
        image = random_image(16, 16).astype(np.float64)
        target = np.random.default_rng(1).normal(size=(4, 8))
        gradcheck(lambda: tensor.tsum(proj(image).tokens * target), proj.parameters(),
                  max_checks=6)


class TestProjectPyramid:
    def test_shared_parameters(self, kind, rng):
        proj = pyramid.make_projection(kind, 8, rng)
        pyr = pyramid.build_pyramid(random_image(32, 32), (1.0, 2.0))
        before = [p.data.copy() for p in proj.parameters()]
        levels = pyramid.project_pyramid(pyr, proj)
        assert len(levels) == 2
        assert [lv.size for lv in levels] == [4, 16]
        assert all(lv.stride == proj.stride for lv in levels)
        assert all(np.array_equal(a, p.data) for a, p in zip(before, proj.parameters()))
        # One parameter set no matter how deep the pyramid is.
        deeper = pyramid.project_pyramid(pyramid.build_pyramid(random_image(32, 32),
                                                               (0.5, 1.0, 2.0)), proj)
        assert len(deeper) == 3 and len(proj.parameters()) == len(before)

    def test_constant_image(self, rng):
        proj = pyramid.LinearPatchProjection(8, 16, rng)
        pyr = pyramid.build_pyramid(np.full((3, 32, 32), 0.3, dtype=np.float32), (1.0, 2.0))
        tokens = np.concatenate([lv.tokens.data for lv in pyramid.project_pyramid(pyr, proj)])
        assert tokens.shape == (20, 8)
        assert np.allclose(tokens, tokens[0], atol=1e-5)

    def test_feature_levels(self, rng):
        proj = pyramid.ResidualProjection(8, 3, rng)
        pyr = pyramid.build_pyramid(random_image(64, 64), (1.0,))
        levels = pyramid.feature_levels(pyr, proj)
        assert [lv.grid for lv in levels] == [(8, 8), (4, 4)]
        assert [lv.stride for lv in levels] == [8, 16]
        assert all(lv.tokens.shape[1] == 8 for lv in levels)

    def test_feature_levels_needs_res(self, rng):
        pyr = pyramid.build_pyramid(random_image(64, 64), (1.0,))
        with pytest.raises(settings.ConfigError):
            pyramid.feature_levels(pyr, pyramid.ConvProjection(8, 3, rng))
        with pytest.raises(settings.ConfigError):
            pyramid.feature_levels(pyr, pyramid.ResidualProjection(8, 2, rng))

    def test_map_token_inverse(self):
        fmap = Tensor(np.arange(24, dtype=float).reshape(2, 3, 4))
        tokens = pyramid.map_to_tokens(fmap)
        assert tokens.shape == (12, 2)
        assert tokens.data[5].tolist() == [5.0, 17.0]
        assert np.array_equal(pyramid.tokens_to_map(tokens, (3, 4)).data, fmap.data)
