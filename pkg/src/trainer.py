# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""trainer.py: deterministic, resumable training loop.

All randomness of step s (batch choice, augmentation and point sampling) is
derived from (seed, s), so a run resumed from a checkpoint continues exactly
as the uninterrupted run would have.
"""

import logging
import os
import typing as t

import numpy as np

import src.checkpoint as checkpoint
import src.exporter as exporter
import src.fileparse as fileparse
import src.losses as losses
import src.model as model
import src.optim as optim
import src.settings as settings
import src.synth_data as synth_data
import src.tensor as tensor
from src.rng import Xoshiro256, mix

LOSS_LOG = "loss_log.txt"
LAST_CHECKPOINT = "last.attr"
RUN_CONFIG = "run_config.txt"

# Stream identifiers mixed into per-step seeds.
_BATCH, _AUGMENT, _POINTS = 1, 2, 3


def checkpoint_name(step: int) -> str:
    return "ckpt_{:06d}.attr".format(step)


def load_model(path: str, config: model.ModelConfig = None) -> model.ATTR:
    """
    Build a model from the current settings and load parameters from a checkpoint.

    Raises:
      checkpoint.CheckpointError: the file is unreadable or lacks a parameter.
    """
    detector = model.build_model(config)
    state = checkpoint.read_checkpoint(path)
    try:
        detector.load_state_dict(state)
    except (KeyError, tensor.ShapeError) as e:
        raise checkpoint.CheckpointError("{}: does not match the model: {}".format(path, e))
    return detector


class Trainer:
    """
    Trains a detector on a list of dataset items.

    Args:
      detector: the model to train.
      items: training images with their ground-truth polygons.
      out_dir: directory receiving checkpoints, the loss log and run_config.txt.
      total_steps: defaults to the total_steps setting.
      dump_graph: if given, the first step's gradient tape is written there as DOT.
    """

    def __init__(self, detector: model.ATTR, items: t.Sequence[fileparse.DatasetItem],
                 out_dir: str, total_steps: int = None, dump_graph: str = None):
        if not items:
            raise fileparse.DataError("no training samples")
        self.model = detector
        self.items = list(items)
        self.out_dir = out_dir
        self.total_steps = settings.total_steps if total_steps is None else total_steps
        self.dump_graph = dump_graph
        self.seed = settings.seed
        self.batch_size = settings.batch_size
        self.augment = settings.augment
        self.loss_config = losses.LossConfig.from_settings()
        schedule = optim.StepSchedule(settings.lr, self.total_steps,
                                      settings.lr_milestones, settings.lr_gamma)
        backbone, heads = detector.parameter_groups()
        self.optimizer = optim.AdamW([optim.ParamGroup(backbone, settings.backbone_lr_mult),
                                      optim.ParamGroup(heads, 1.0)],
                                     schedule, weight_decay=settings.weight_decay)
        self.step = 0
        """Number of completed steps."""

    def batch(self, step: int) -> t.List[synth_data.SceneSample]:
        rng = Xoshiro256.from_seed(mix(self.seed, step, _BATCH))
        samples = []
        for b in range(self.batch_size):
            item = self.items[rng.integers(0, len(self.items) - 1)]
            sample = synth_data.SceneSample(item.image, list(item.polygons), step)
            if self.augment:
                sample = synth_data.augment(sample, mix(self.seed, step, b, _AUGMENT))
            samples.append(sample)
        return samples

    def train_step(self, step: int) -> t.Tuple[float, float]:
        """
        Run one optimisation step.

        Returns:
          (loss, learning rate of the head parameters) for the step.
        """
        lr = self.optimizer.group_lrs(step)[-1]
        total = None
        for b, sample in enumerate(self.batch(step)):
            output = self.model(sample.image)
            gt_masks = output.meta.gt_masks(sample.instances)
            rng = Xoshiro256.from_seed(mix(self.seed, step, b, _POINTS)).numpy_generator()
            loss, _ = losses.loss_total(output.instances, gt_masks, self.loss_config, rng)
            total = loss if total is None else total + loss
        total = total * (1.0 / self.batch_size)
        if self.dump_graph is not None:
            exporter.TapeDotExporter(tensor.tape()).export(self.dump_graph)
            self.dump_graph = None
        self.model.zero_grad()
        total.backward()
        self.optimizer.step()
        return total.item(), lr

    def state(self) -> t.Dict[str, np.ndarray]:
        state = dict(self.model.state_dict())
        state.update(self.optimizer.state_dict())
        state["meta/step"] = np.array(self.step, dtype=np.float64)
        return state

    def save(self) -> str:
        path = os.path.join(self.out_dir, checkpoint_name(self.step))
        state = self.state()
        checkpoint.write_checkpoint(path, state)
        checkpoint.write_checkpoint(os.path.join(self.out_dir, LAST_CHECKPOINT), state)
        logging.info("Saved checkpoint %s.", path)
        return path

    def resume(self, path: str):
        """
        Continue from a checkpoint written by save().

        Raises:
          checkpoint.CheckpointError: the checkpoint does not fit this model.
        """
        state = checkpoint.read_checkpoint(path)
        try:
            self.model.load_state_dict(state)
            self.optimizer.load_state_dict(state)
            self.step = int(round(float(state["meta/step"].reshape(-1)[0])))
        except (KeyError, tensor.ShapeError) as e:
            raise checkpoint.CheckpointError("{}: cannot resume: {}".format(path, e))
        logging.info("Resuming from step %s of %s.", self.step, self.total_steps)

    def _open_log(self):
        path = os.path.join(self.out_dir, LOSS_LOG)
        rows = []
        if self.step and os.path.isfile(path):
            with open(path) as f:
                rows = [line for line in f.readlines()[1:]
                        if line.strip() and int(line.split(",")[0]) < self.step]
        log = open(path, "w")
        log.write("step,loss,lr\n")
        log.writelines(rows)
        return log

    def run(self) -> model.ATTR:
        os.makedirs(self.out_dir, exist_ok=True)
        settings.write_run_config(os.path.join(self.out_dir, RUN_CONFIG))
        with self._open_log() as log:
            while self.step < self.total_steps:
                step = self.step
                loss, lr = self.train_step(step)
                self.step = step + 1
                log.write("{},{!r},{!r}\n".format(step, loss, lr))
                log.flush()
                if step % settings.log_every == 0 or self.step == self.total_steps:
                    logging.info("Step %s/%s: loss %.4f, lr %.2e",
                                 self.step, self.total_steps, loss, lr)
                if self.step % settings.save_every == 0 or self.step == self.total_steps:
                    self.save()
        return self.model


def train(items: t.Sequence[fileparse.DatasetItem], out_dir: str, total_steps: int = None,
          resume: str = None, dump_graph: str = None) -> model.ATTR:
    """Build a model from the current settings and train it."""
    trainer = Trainer(model.build_model(), items, out_dir, total_steps, dump_graph)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()
