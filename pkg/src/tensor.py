# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""tensor.py: dense tensors with a reverse-mode gradient tape.

Every differentiable operation used by the detector lives here. An operation
computes its result with numpy and, if any input requires a gradient, records
a backward rule on the global GradTape. Calling backward() on a scalar replays
the tape in reverse creation order, which is a valid topological order, and
then clears it.

Training runs in 32-bit floats; the precision() context manager switches newly
created tensors to 64 bits for finite-difference gradient checks.
"""

import contextlib
import typing as t

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_dtype = np.float32
"""Floating point type of newly created tensors."""

_grad_enabled = True
"""Whether operations are recorded on the tape."""

BCE_LOGIT_CLIP = float(np.log((1.0 - 1e-7) / 1e-7))
"""Logit magnitude at which a probability reaches the clip range [1e-7, 1-1e-7]."""

LN_EPS = 1e-5
"""Variance floor of layer_norm."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


@contextlib.contextmanager
def precision(dtype):
    """Create tensors of the given float type inside this context."""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


def default_dtype():
    return _dtype


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """
    A dense array that may take part in gradient computation.

    Args:
      data: array-like contents, converted to the current float type.
      requires_grad: whether gradients should be computed for this tensor.
      name: optional label used by graph exports and checkpoints.
    """

    __array_priority__ = 100
    __array_ufunc__ = None
    """Make numpy operators defer to Tensor, so ndarray + Tensor is a Tensor."""

    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        """Accumulated gradient, same shape as data, or None."""
        self.name = name

    @property
    def shape(self) -> t.Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Back-propagate from this scalar through the global tape."""
        _tape.backward(self)

    def __repr__(self):
        return "Tensor(shape={}, requires_grad={})".format(self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class TapeEntry(t.NamedTuple):
    op: str
    output: Tensor
    inputs: t.Tuple[Tensor, ...]
    backward: t.Callable[[np.ndarray], t.Sequence[t.Optional[np.ndarray]]]


class GradTape:
    """Ordered record of the operations performed since the last backward pass."""

    def __init__(self):
        self.entries = []
        """TapeEntry records in creation order."""

    def __len__(self):
        return len(self.entries)

    def record(self, op: str, output: Tensor, inputs: t.Sequence[Tensor], backward):
        self.entries.append(TapeEntry(op, output, tuple(inputs), backward))

    def clear(self):
        self.entries = []

    def backward(self, loss: Tensor):
        """
        Populate .grad on every requires_grad tensor that loss depends on.

        Raises:
          ShapeError: loss is not a single element.
        """
        if loss.size != 1:
            raise ShapeError("backward needs a scalar, got shape {}".format(loss.shape))
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi), inp.shape).astype(inp.data.dtype, copy=False)
                inp.grad = gi if inp.grad is None else inp.grad + gi
        self.clear()


_tape = GradTape()


def tape() -> GradTape:
    """The global tape operations are recorded on."""
    return _tape


def parameter(data, name: str = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: t.Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(op: str, data: np.ndarray, inputs: t.Sequence[Tensor], backward) -> Tensor:
    needs_grad = _grad_enabled and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        _tape.record(op, out, inputs, backward)
    return out


## Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result("div", a.data / b.data, (a, b),
                   lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a) -> Tensor:
    a = constant(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by value; no gradient flows there."""
    a = constant(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result("masked_fill", np.where(mask, value, a.data), (a,),
                   lambda g: (np.where(mask, 0, g),))


## Reductions and shape manipulation

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = constant(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = constant(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,),
                   lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = constant(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _result("getitem", a.data[index], (a,), backward)


def concat(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(x) for x in tensors]
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return _result("concat", np.concatenate([x.data for x in tensors], axis=axis),
                   tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(x) for x in tensors]
    n = len(tensors)
    return _result("stack", np.stack([x.data for x in tensors], axis=axis), tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


## Linear algebra

def matmul(a, b) -> Tensor:
    """
    Matrix product of the last two axes, broadcasting leading axes.

    Raises:
      ShapeError: the inner dimensions differ or an operand is not a matrix.
    """
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul of {} and {}".format(a.shape, b.shape))
    return _result("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ np.swapaxes(b.data, -1, -2),
                              np.swapaxes(a.data, -1, -2) @ g))


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias, with weight stored as [in, out]."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def mlp3(x, params: t.Sequence[t.Tuple[Tensor, Tensor]]) -> Tensor:
    """Three linear layers with relu between them."""
    if len(params) != 3:
        raise ShapeError("mlp3 takes exactly three layers")
    (w1, b1), (w2, b2), (w3, b3) = params
    return linear(relu(linear(relu(linear(x, w1, b1)), w2, b2)), w3, b3)


## Normalisation and probabilities

def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale by gain and shift by bias."""
    x, gain, bias = constant(x), constant(gain), constant(bias)
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm width {} vs gain {}".format(x.shape, gain.shape))
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g * xhat, g

    return _result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """
    Element-wise binary cross-entropy of sigmoid(logits) against targets.
    Probabilities are clipped to [1e-7, 1 - 1e-7] by clipping the logits.
    """
    logits = constant(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    inside = np.abs(logits.data) <= BCE_LOGIT_CLIP
    z = np.clip(logits.data, -BCE_LOGIT_CLIP, BCE_LOGIT_CLIP)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _result("bce", loss, (logits,),
                   lambda g: (g * (_sigmoid(z) - y) * inside,))


## Images

def _im2col(padded: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out]
    return windows.transpose(0, 3, 4, 1, 2).reshape(padded.shape[0] * k * k, h_out * w_out)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int,
            h_out: int, w_out: int) -> np.ndarray:
    channels = padded_shape[0]
    cols = cols.reshape(channels, k, k, h_out, w_out)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, i, j]
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = None) -> Tensor:
    """
    2-D cross-correlation of a C_in x H x W map with C_out x C_in x k x k filters.

    Args:
      x: input map.
      weight: filters; k must be odd.
      bias: optional C_out vector.
      stride: step between output samples.
      padding: zero padding on each side, k // 2 when omitted.

    Raises:
      ShapeError: channel mismatch, even kernel or non-3-D input.
    """
    x, weight = constant(x), constant(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d expects C x H x W input and 4-D filters")
    c_in, height, width = x.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in:
        raise ShapeError("conv2d channel mismatch: input {} vs filters {}".format(c_in, w_in))
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d kernel must be square and odd, got {}x{}".format(k, k2))
    pad = k // 2 if padding is None else padding
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (height + 2 * pad - k) // stride + 1
    w_out = (width + 2 * pad - k) // stride + 1
    cols = _im2col(padded, k, stride, h_out, w_out)
    flat_w = weight.data.reshape(c_out, -1)
    out = (flat_w @ cols).reshape(c_out, h_out, w_out)
    inputs = [x, weight]
    if bias is not None:
        bias = constant(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gx = _col2im(flat_w.T @ g2, padded.shape, k, stride, h_out, w_out)
        grads = [gx[:, pad:pad + height, pad:pad + width], (g2 @ cols.T).reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _result("conv2d", out, inputs, backward)


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling of a C x H x W map."""
    x = constant(x)
    c, height, width = x.shape
    if height % k or width % k:
        raise ShapeError("avg_pool2d: {}x{} not divisible by {}".format(height, width, k))
    out = x.data.reshape(c, height // k, k, width // k, k).mean(axis=(2, 4))
    return _result("avg_pool2d", out, (x,),
                   lambda g: (np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k),))


def channel_norm(x, gain, bias) -> Tensor:
    """layer_norm over the channel axis of a C x H x W map."""
    return transpose(layer_norm(transpose(x, (1, 2, 0)), gain, bias), (2, 0, 1))


## Sampling

def _scatter_rows(n_rows: int, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.empty((n_rows, values.shape[1]), dtype=values.dtype)
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(rows, weights=values[:, j], minlength=n_rows)
    return out


def _bilinear_corners(px: np.ndarray, py: np.ndarray, height: int, width: int):
    """
    Returns the four interpolation corners of normalised points as tuples of
    (flat index, weight, d weight / d px, d weight / d py). Corners outside the
    map, and every corner of a point outside [0, 1], carry zero weight.
    """
    inside = (px >= 0) & (px <= 1) & (py >= 0) & (py <= 1)
    x = px * width - 0.5
    y = py * height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        valid = inside & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        m = valid.astype(px.dtype)
        index = np.where(valid, yi * width + xi, 0)
        sx = width if dx else -width
        sy = height if dy else -height
        corners.append((index, wx * wy * m, sx * wy * m, sy * wx * m))
    return corners


def bilinear_sample(feature_map, points) -> Tensor:
    """
    Sample a C x H x W map at P normalised (x, y) points, giving P x C.
    Pixel (i, j) has its centre at ((j + 0.5) / W, (i + 0.5) / H).
    Differentiable with respect to both the map and the points.
    """
    feature_map, points = constant(feature_map), constant(points)
    c, height, width = feature_map.shape
    flat = feature_map.data.reshape(c, height * width).T
    corners = _bilinear_corners(points.data[:, 0], points.data[:, 1], height, width)
    out = sum(w[:, None] * flat[index] for index, w, _, _ in corners)

    def backward(g):
        gflat = np.zeros_like(flat)
        gpoints = np.zeros_like(points.data)
        for index, w, dwx, dwy in corners:
            gflat += _scatter_rows(height * width, index, w[:, None] * g)
            v = (flat[index] * g).sum(axis=1)
            gpoints[:, 0] += dwx * v
            gpoints[:, 1] += dwy * v
        return gflat.T.reshape(c, height, width), gpoints

    return _result("bilinear_sample", out, (feature_map, points), backward)


def ms_deform_attn(values: t.Sequence[Tensor], shapes: t.Sequence[t.Tuple[int, int]],
                   locations, weights) -> Tensor:
    """
    Multi-scale deformable attention core.

    Args:
      values: per level, n_l x c value tokens in row-major grid order; the
        channels are split into M heads of c / M.
      shapes: per level grid shape (h_l, w_l).
      locations: Nq x M x L x K x 2 normalised sampling points.
      weights: Nq x M x L x K attention weights.

    Returns:
      Nq x c tensor; head m fills channels [m*d, (m+1)*d).
    """
    values = [constant(v) for v in values]
    locations, weights = constant(locations), constant(weights)
    n_q, heads, levels, points, _ = locations.shape
    if len(values) != levels or len(shapes) != levels:
        raise ShapeError("ms_deform_attn: {} value levels for {} location levels"
                         .format(len(values), levels))
    c = values[0].shape[1]
    d = c // heads
    dtype = values[0].data.dtype
    out = np.zeros((heads, n_q, d), dtype=dtype)
    cache = []
    for l, (v, (h, w)) in enumerate(zip(values, shapes)):
        if v.shape != (h * w, c):
            raise ShapeError("level {} has {} tokens for a {}x{} grid".format(l, v.shape, h, w))
        table = v.data.reshape(h * w, heads, d).transpose(1, 0, 2).reshape(heads * h * w, d)
        pts = locations.data[:, :, l].transpose(1, 0, 2, 3).reshape(heads, n_q * points, 2)
        corners = _bilinear_corners(pts[..., 0], pts[..., 1], h, w)
        offset = (np.arange(heads) * (h * w))[:, None]
        a = weights.data[:, :, l].transpose(1, 0, 2).reshape(heads, n_q * points)
        rows = [index + offset for index, _, _, _ in corners]
        sampled = sum(c_[1][..., None] * table[r] for c_, r in zip(corners, rows))
        out += (a[..., None] * sampled).reshape(heads, n_q, points, d).sum(axis=2)
        cache.append((table, corners, rows, a, sampled))

    def backward(g):
        gh = g.reshape(n_q, heads, d).transpose(1, 0, 2)
        gs = np.repeat(gh[:, :, None, :], points, axis=2).reshape(heads, n_q * points, d)
        gvalues = []
        glocations = np.zeros_like(locations.data)
        gweights = np.zeros_like(weights.data)
        for l, (h, w) in enumerate(shapes):
            table, corners, rows, a, sampled = cache[l]
            gweights[:, :, l] = (gs * sampled).sum(axis=-1).reshape(heads, n_q, points).transpose(1, 0, 2)
            gsw = gs * a[..., None]
            gtable = np.zeros_like(table)
            gx = np.zeros_like(a)
            gy = np.zeros_like(a)
            for (index, wgt, dwx, dwy), r in zip(corners, rows):
                gtable += _scatter_rows(table.shape[0], r.ravel(),
                                        (wgt[..., None] * gsw).reshape(-1, d))
                vdot = (table[r] * gsw).sum(axis=-1)
                gx += dwx * vdot
                gy += dwy * vdot
            gvalues.append(gtable.reshape(heads, h * w, d).transpose(1, 0, 2).reshape(h * w, c))
            glocations[:, :, l] = np.stack([gx, gy], axis=-1) \
                .reshape(heads, n_q, points, 2).transpose(1, 0, 2, 3)
        return tuple(gvalues) + (glocations, gweights)

    result = out.transpose(1, 0, 2).reshape(n_q, c)
    return _result("ms_deform_attn", result, tuple(values) + (locations, weights), backward)
