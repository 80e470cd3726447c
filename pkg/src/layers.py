# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""layers.py: parameterised building blocks and the parameter registry"""

import abc
import typing as t

import numpy as np

import src.tensor as tensor
from src.tensor import Tensor


def xavier_uniform(rng: np.random.Generator, shape: t.Tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module(abc.ABC):
    """
    Base class of everything holding parameters.

    Parameters are Tensor attributes with requires_grad set. Sub-modules may
    be attributes or lists of modules; they are named by attribute path, for
    example "encoder.units.0.attn.value_proj.weight".
    """

    def named_parameters(self, prefix: str = "") -> t.Iterator[t.Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + attr + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters("{}{}.{}.".format(prefix, attr, i))

    def parameters(self) -> t.List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> t.Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: t.Mapping[str, np.ndarray]):
        """
        Copy arrays into the named parameters.

        Raises:
          KeyError: a parameter is missing from state.
          tensor.ShapeError: a stored array has the wrong shape.
        """
        for name, p in self.named_parameters():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise tensor.ShapeError("parameter {} has shape {}, stored {}"
                                        .format(name, p.shape, value.shape))
            p.data[...] = value

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """
    y = x W + b with W stored as [in, out].

    Args:
      zero_init: start with zero weights instead of Xavier-uniform ones.
    """

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        w = np.zeros((dim_in, dim_out)) if zero_init \
            else xavier_uniform(rng, (dim_in, dim_out), dim_in, dim_out)
        self.weight = tensor.parameter(w)
        self.bias = tensor.parameter(np.zeros(dim_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return tensor.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, dim_in: int, dim_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1):
        fan_in = dim_in * kernel * kernel
        fan_out = dim_out * kernel * kernel
        self.weight = tensor.parameter(xavier_uniform(
            rng, (dim_out, dim_in, kernel, kernel), fan_in, fan_out))
        self.bias = tensor.parameter(np.zeros(dim_out))
        self.stride = stride

    def __call__(self, x) -> Tensor:
        return tensor.conv2d(x, self.weight, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = tensor.parameter(np.ones(dim))
        self.bias = tensor.parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return tensor.layer_norm(x, self.gain, self.bias)

    def channels(self, x) -> Tensor:
        """Normalise the channel axis of a C x H x W map."""
        return tensor.channel_norm(x, self.gain, self.bias)


class MLP3(Module):
    """Three linear layers of constant width with relu between them."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.layers = [Linear(dim, dim, rng) for _ in range(3)]

    def __call__(self, x) -> Tensor:
        return tensor.mlp3(x, [(layer.weight, layer.bias) for layer in self.layers])


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(tensor.relu(self.fc1(x)))
