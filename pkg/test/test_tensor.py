# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

import numpy as np
import pytest

import src.checkpoint as checkpoint
import src.layers as layers
import src.tensor as tensor
from src.tensor import Tensor


@pytest.fixture(params=[0, 1, 2])
def rng(request):
    return np.random.default_rng(request.param)


def brute_force_msda(values, shapes, locations, weights):
    """Loop over queries, heads, levels and points with bilinear_sample."""
    n_q, heads, levels, points, _ = locations.shape
    c = values[0].shape[1]
    d = c // heads
    out = np.zeros((n_q, c))
    for q in range(n_q):
        for m in range(heads):
            for l, (h, w) in enumerate(shapes):
                fmap = values[l][:, m * d:(m + 1) * d].T.reshape(d, h, w)
                for k in range(points):
                    sample = tensor.bilinear_sample(fmap, locations[q, m, l, k][None]).data[0]
                    out[q, m * d:(m + 1) * d] += weights[q, m, l, k] * sample
    return out


class TestForward:
    def test_matmul_values(self):
        a = Tensor([[1, 2], [3, 4]])
        assert np.array_equal(tensor.matmul(a, Tensor([[5], [6]])).data, [[17], [39]])
        assert np.array_equal(tensor.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_matmul_shape_error(self):
        with pytest.raises(tensor.ShapeError):
            tensor.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_conv_identity(self, rng):
        x = rng.normal(size=(1, 5, 6))
        out = tensor.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.allclose(out.data, x)

    def test_conv_hand_sum(self):
        out = tensor.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data[0, 1, 1] == 9
        assert out.data[0, 0, 0] == 4

    def test_conv_output_size(self, rng):
        out = tensor.conv2d(Tensor(rng.normal(size=(2, 8, 8))),
                            Tensor(rng.normal(size=(3, 2, 3, 3))), stride=2)
        assert out.shape == (3, 4, 4)

    def test_conv_matches_loop(self, rng):
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = tensor.conv2d(Tensor(x), Tensor(w)).data
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    expected = (padded[:, i:i + 3, j:j + 3] * w[o]).sum()
                    assert out[o, i, j] == pytest.approx(expected, abs=1e-4)

    def test_conv_errors(self):
        with pytest.raises(tensor.ShapeError):
            tensor.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(tensor.ShapeError):
            tensor.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_softmax(self):
        assert np.allclose(tensor.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
        out = tensor.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out)) and np.allclose(out, 0.5)

    def test_softmax_rows_sum_to_one(self, rng):
        out = tensor.softmax(Tensor(rng.normal(size=(6, 9)) * 10), axis=-1).data
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out >= 0)

    def test_sigmoid(self, rng):
        assert tensor.sigmoid(Tensor([0.0])).data[0] == 0.5
        out = tensor.sigmoid(Tensor(rng.normal(size=50) * 5)).data
        assert np.all((out > 0) & (out < 1))

    def test_layer_norm_constant(self):
        out = tensor.layer_norm(Tensor(np.full((2, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.allclose(out.data, 0.0)

    def test_masked_fill(self):
        out = tensor.masked_fill(Tensor([1.0, 2.0, 3.0]), np.array([False, True, False]), -np.inf)
        assert out.data[1] == -np.inf and out.data[2] == 3.0

    def test_avg_pool(self):
        x = np.arange(16, dtype=float).reshape(1, 4, 4)
        assert np.array_equal(tensor.avg_pool2d(Tensor(x), 2).data[0], [[2.5, 4.5], [10.5, 12.5]])
        with pytest.raises(tensor.ShapeError):
            tensor.avg_pool2d(Tensor(np.ones((1, 3, 4))), 2)

    def test_deterministic(self, rng):
        x = rng.normal(size=(3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        a = tensor.conv2d(Tensor(x), Tensor(w), stride=2).data
        b = tensor.conv2d(Tensor(x), Tensor(w), stride=2).data
        assert np.array_equal(a, b)


class TestBilinear:
    def test_pixel_centre(self, rng):
        fmap = rng.normal(size=(2, 4, 5))
        points = np.array([[(3 + 0.5) / 5, (1 + 0.5) / 4]])
        out = tensor.bilinear_sample(Tensor(fmap), points).data
        assert np.allclose(out[0], fmap[:, 1, 3])

    def test_midpoint(self):
        fmap = np.array([[[0.0, 0.0], [1.0, 1.0]]])
        out = tensor.bilinear_sample(Tensor(fmap), np.array([[0.5, 0.5]])).data
        assert out[0, 0] == pytest.approx(0.5)

    def test_outside_is_zero(self):
        fmap = np.ones((1, 3, 3))
        out = tensor.bilinear_sample(Tensor(fmap), np.array([[-0.1, 0.5], [0.5, 1.2]])).data
        assert np.array_equal(out, np.zeros((2, 1)))

    def test_border_fades(self):
        fmap = np.ones((1, 2, 2))
        out = tensor.bilinear_sample(Tensor(fmap), np.array([[0.0, 0.5]])).data
        assert out[0, 0] == pytest.approx(0.5)


class TestGradients:
    def test_matmul(self, gradcheck, rng):
        a = tensor.parameter(rng.normal(size=(4, 5)))
        b = tensor.parameter(rng.normal(size=(5, 3)))
        gradcheck(lambda: tensor.tsum(tensor.matmul(a, b)), [a, b])

    def test_transposed_input(self, gradcheck, rng):
        a = tensor.parameter(rng.normal(size=(4, 3)).T)
        assert not a.data.flags.c_contiguous
        w = rng.normal(size=(3, 4))
        assert gradcheck(lambda: tensor.tsum(a * a * w), [a]) <= 1e-6
        assert np.allclose(a.grad, 2 * a.data * w)

    def test_batched_matmul(self, gradcheck, rng):
        a = tensor.parameter(rng.normal(size=(2, 3, 4)))
        b = tensor.parameter(rng.normal(size=(2, 4, 2)))
        w = rng.normal(size=(2, 3, 2))
        gradcheck(lambda: tensor.tsum(tensor.matmul(a, b) * w), [a, b])

    def test_elementwise(self, gradcheck, rng):
        a = tensor.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
        b = tensor.parameter(rng.uniform(0.5, 2.0, size=(4,)))

        def fn():
            x = (a * b - a / b) * -a + b
            return tensor.tsum(x * x - a)
        gradcheck(fn, [a, b])

    def test_conv2d(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=(2, 8, 8)))
        w = tensor.parameter(rng.normal(size=(3, 2, 3, 3)))
        b = tensor.parameter(rng.normal(size=3))
        target = rng.normal(size=(3, 4, 4))
        gradcheck(lambda: tensor.tsum(tensor.conv2d(x, w, b, stride=2) * target), [x, w, b])

    def test_softmax(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=5))
        target = rng.normal(size=5)
        gradcheck(lambda: tensor.tsum(tensor.softmax(x) * target), [x])

    def test_layer_norm(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=(4, 6)))
        gain = tensor.parameter(rng.normal(size=6))
        bias = tensor.parameter(rng.normal(size=6))
        target = rng.normal(size=(4, 6))
        gradcheck(lambda: tensor.tsum(tensor.layer_norm(x, gain, bias) * target),
                  [x, gain, bias])

    def test_channel_norm_and_pool(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=(3, 4, 4)))
        gain = tensor.parameter(rng.normal(size=3))
        bias = tensor.parameter(rng.normal(size=3))
        target = rng.normal(size=(3, 2, 2))
        gradcheck(lambda: tensor.tsum(tensor.avg_pool2d(
            tensor.channel_norm(x, gain, bias), 2) * target), [x, gain, bias])

    def test_sigmoid_relu_mlp3(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=(3, 4)))
        mlp = layers.MLP3(4, rng)
        params = [x] + mlp.parameters()
        gradcheck(lambda: tensor.tsum(tensor.sigmoid(mlp(x))), params)

    def test_bce(self, gradcheck, rng):
        x = tensor.parameter(rng.normal(size=10) * 3)
        y = rng.integers(0, 2, size=10)
        gradcheck(lambda: tensor.tsum(tensor.bce_with_logits(x, y)), [x])

    def test_shape_ops(self, gradcheck, rng):
        a = tensor.parameter(rng.normal(size=(3, 4)))
        b = tensor.parameter(rng.normal(size=(2, 4)))

        def fn():
            joined = tensor.concat([a, b], axis=0)
            rows = joined[np.array([0, 4, 4, 2])]
            stacked = tensor.stack([rows, rows * 2.0], axis=1)
            moved = tensor.transpose(tensor.reshape(stacked, (4, 8)))
            return tensor.mean(moved[1:5] * moved[2:6]) + tensor.tsum(a[:, 1])
        gradcheck(fn, [a, b])

    def test_masked_fill_blocks_gradient(self, float64, rng):
        x = tensor.parameter(rng.normal(size=4))
        mask = np.array([True, False, True, False])
        tensor.tsum(tensor.masked_fill(x, mask, 0.0) * 3.0).backward()
        assert np.array_equal(x.grad, [0, 3, 0, 3])

    def test_bilinear(self, gradcheck, rng):
        fmap = tensor.parameter(rng.normal(size=(2, 5, 6)))
        points = tensor.parameter(rng.uniform(0.1, 0.9, size=(7, 2)))
        target = rng.normal(size=(7, 2))
        gradcheck(lambda: tensor.tsum(tensor.bilinear_sample(fmap, points) * target),
                  [fmap, points])

    def test_ms_deform_attn(self, gradcheck, rng):
        shapes = [(4, 4), (2, 3)]
        values = [tensor.parameter(rng.normal(size=(h * w, 4))) for h, w in shapes]
        locations = tensor.parameter(rng.uniform(0.1, 0.9, size=(3, 2, 2, 2, 2)))
        weights = tensor.parameter(rng.uniform(size=(3, 2, 2, 2)))
        target = rng.normal(size=(3, 4))
        gradcheck(lambda: tensor.tsum(tensor.ms_deform_attn(values, shapes, locations, weights)
                                      * target), values + [locations, weights])


class TestDeformAttn:
    def test_matches_brute_force(self, rng):
        shapes = [(5, 6), (3, 3), (2, 4)]
        values = [rng.normal(size=(h * w, 8)) for h, w in shapes]
        locations = rng.uniform(-0.1, 1.1, size=(4, 2, 3, 3, 2))
        weights = rng.uniform(size=(4, 2, 3, 3))
        with tensor.precision(np.float64):
            fast = tensor.ms_deform_attn([Tensor(v) for v in values], shapes,
                                         locations, weights).data
            slow = brute_force_msda(values, shapes, locations, weights)
        assert np.abs(fast - slow).max() <= 1e-5

    def test_level_mismatch(self, rng):
        with pytest.raises(tensor.ShapeError):
            tensor.ms_deform_attn([Tensor(np.ones((4, 2)))], [(2, 2), (1, 1)],
                                  np.zeros((1, 1, 2, 1, 2)), np.ones((1, 1, 2, 1)))


class TestTape:
    def test_cleared_after_backward(self, float64):
        x = tensor.parameter([1.0, 2.0])
        loss = tensor.tsum(x * x)
        assert len(tensor.tape()) > 0
        loss.backward()
        assert len(tensor.tape()) == 0
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_no_grad_records_nothing(self, float64):
        x = tensor.parameter([1.0, 2.0])
        with tensor.no_grad():
            out = tensor.tsum(x * x)
        assert len(tensor.tape()) == 0
        assert not out.requires_grad

    def test_backward_needs_scalar(self, float64):
        x = tensor.parameter([1.0, 2.0])
        with pytest.raises(tensor.ShapeError):
            (x * 2.0).backward()
        tensor.tape().clear()

    def test_precision(self):
        with tensor.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"b.weight": rng.normal(size=(3, 4)).astype(np.float32),
                  "a.bias": rng.normal(size=5).astype(np.float32),
                  "meta/step": np.array(7.0, dtype=np.float32)}
        path = str(tmp_path / "x.attr")
        checkpoint.write_checkpoint(path, arrays)
        loaded = checkpoint.read_checkpoint(path)
        assert sorted(loaded) == sorted(arrays)
        for name, value in arrays.items():
            assert loaded[name].shape == value.shape
            assert np.array_equal(loaded[name], value)

    def test_layout(self, tmp_path):
        path = str(tmp_path / "x.attr")
        checkpoint.write_checkpoint(path, {"w": np.array([1.5], dtype=np.float32)})
        raw = open(path, "rb").read()
        assert raw[:8] == b"ATTRCKPT"
        assert raw[8:12] == (1).to_bytes(4, "little")
        assert raw[-4:] == np.array([1.5], dtype="<f4").tobytes()

    def test_scalar_keeps_rank(self, tmp_path):
        path = str(tmp_path / "x.attr")
        checkpoint.write_checkpoint(path, {"s": np.float32(2.5),
                                           "t": np.arange(6, dtype=np.float32).reshape(2, 3).T})
        raw = open(path, "rb").read()
        # magic, version, name length, "s", rank 0, then the payload
        assert raw[17:21] == (0).to_bytes(4, "little")
        loaded = checkpoint.read_checkpoint(path)
        assert loaded["s"].shape == () and loaded["s"] == 2.5
        assert np.array_equal(loaded["t"], [[0, 3], [1, 4], [2, 5]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.attr"
        path.write_bytes(b"NOTACKPT\x01\x00\x00\x00")
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.read_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "x.attr")
        checkpoint.write_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
        raw = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(raw[:-3])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.read_checkpoint(path)
