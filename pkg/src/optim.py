# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""optim.py: AdamW with decoupled weight decay and a step learning rate schedule"""

import typing as t

import numpy as np

import src.tensor as tensor
from src.tensor import Tensor


class StepSchedule:
    """
    Piecewise constant learning rate: base_lr multiplied by gamma once for
    every milestone fraction of total_steps that has been reached.
    """

    def __init__(self, base_lr: float, total_steps: int,
                 milestones: t.Sequence[float] = (0.9, 0.95), gamma: float = 0.1):
        self.base_lr = base_lr
        self.boundaries = [int(round(m * total_steps)) for m in milestones]
        self.gamma = gamma

    def factor(self, step: int) -> float:
        return self.gamma ** sum(step >= b for b in self.boundaries)

    def lr(self, step: int) -> float:
        return self.base_lr * self.factor(step)


class ParamGroup(t.NamedTuple):
    params: t.List[t.Tuple[str, Tensor]]
    lr_mult: float = 1.0


class AdamW:
    """
    Adam with decoupled weight decay.

    Args:
      groups: named parameters with their learning rate multipliers.
      schedule: learning rate per step.
      betas: moment decay rates.
      eps: denominator floor.
      weight_decay: decay applied as p -= lr * weight_decay * p.
    """

    def __init__(self, groups: t.Sequence[ParamGroup], schedule: StepSchedule,
                 betas: t.Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.groups = list(groups)
        self.schedule = schedule
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        """Number of steps taken."""

        self.m = {}
        self.v = {}
        for group in self.groups:
            for name, p in group.params:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def group_lrs(self, step: int = None) -> t.List[float]:
        step = self.t if step is None else step
        return [self.schedule.lr(step) * g.lr_mult for g in self.groups]

    def step(self):
        """Update every parameter with a gradient, at the schedule's rate for step t."""
        b1, b2 = self.betas
        lrs = self.group_lrs()
        self.t += 1
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for group, lr in zip(self.groups, lrs):
            for name, p in group.params:
                if p.grad is None:
                    continue
                g = p.grad.astype(p.data.dtype, copy=False)
                m, v = self.m[name], self.v[name]
                p.data *= 1.0 - lr * self.weight_decay
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_dict(self) -> t.Dict[str, np.ndarray]:
        state = {"optim/step": np.array(self.t, dtype=np.float64)}
        state.update({"optim/m/" + name: m for name, m in self.m.items()})
        state.update({"optim/v/" + name: v for name, v in self.v.items()})
        return state

    def load_state_dict(self, state: t.Mapping[str, np.ndarray]):
        """
        Raises:
          KeyError: a moment is missing.
          tensor.ShapeError: a stored moment has the wrong shape.
        """
        self.t = int(round(float(np.asarray(state["optim/step"]).reshape(-1)[0])))
        for name in self.m:
            for prefix, store in (("optim/m/", self.m), ("optim/v/", self.v)):
                value = np.asarray(state[prefix + name])
                if value.shape != store[name].shape:
                    raise tensor.ShapeError("optimizer state {} has shape {}, expected {}"
                                            .format(name, value.shape, store[name].shape))
                store[name][...] = value
