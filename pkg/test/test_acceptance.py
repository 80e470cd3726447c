# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""End-to-end training runs. These take from minutes to hours; run with --runslow."""

import os

import pytest

import src.ablation as ablation
import src.evaluation as evaluation
import src.fileparse as fileparse
import src.postprocess as postprocess
import src.synth_data as synth_data
import src.trainer as trainer

pytestmark = pytest.mark.slow


def synth_items(count, seed, cfg):
    samples = [synth_data.generate_sample(synth_data.sample_seed(seed, i), cfg)
               for i in range(count)]
    return [fileparse.DatasetItem("img_{:05d}".format(i), s.image, s.instances)
            for i, s in enumerate(samples)]


def test_overfit_four_images(config, tmp_path):
    config.set_from_pairs("num_queries=20, infer_short_side=96")
    items = synth_items(4, 0, synth_data.SynthConfig.from_settings())
    detector = trainer.train(items, str(tmp_path / "run"), total_steps=2000)
    dets = {item.ident: postprocess.detect(detector, item.image).scored() for item in items}
    gts = {item.ident: item.polygons for item in items}
    report = evaluation.evaluate(dets, gts, 0.5)
    assert report.f_measure >= 0.99
    assert report.tiou_f >= 0.7


def test_multi_scale_beats_single_and_late_fusion(config, tmp_path):
    config.set_from_pairs("small_text_prob=0.7, infer_short_side=0")
    cfg = synth_data.SynthConfig.from_settings()
    train_items = synth_items(32, 1, cfg)
    test_items = synth_items(64, 2, cfg)
    scales = {r["variant"]: r for r in ablation.run_ablation(
        "single-vs-multi", train_items, test_items, str(tmp_path / "scales"))}
    assert scales["{1/2,1,2}"]["recall"] >= scales["{1}"]["recall"]
    fusion = {r["variant"]: r for r in ablation.run_ablation(
        "late-fusion", train_items, test_items, str(tmp_path / "fusion"))}
    assert fusion["ATTR {1/2,1,2}"]["f-measure"] > fusion["I1+I2+I3 late fusion"]["f-measure"]


def test_training_is_bitwise_deterministic(tiny, tmp_path):
    items = synth_items(4, 0, synth_data.SynthConfig(32, 32, 1, 3))
    for name in ("a", "b"):
        trainer.train(items, str(tmp_path / name), total_steps=6)
    for ckpt in ("ckpt_000002.attr", "ckpt_000004.attr", "ckpt_000006.attr"):
        with open(os.path.join(str(tmp_path / "a"), ckpt), "rb") as a, \
                open(os.path.join(str(tmp_path / "b"), ckpt), "rb") as b:
            assert a.read() == b.read()


def test_loss_falls_on_one_sample(config, tmp_path):
    """
    Overfitting one image, at least 90% of 200 steps end below the starting loss.

    The mask losses are taken on randomly sampled points, so consecutive
    steps can go up by sampling noise alone. The starting loss is therefore
    the mean of the first 10 steps, and the last 10 steps must average under
    half of it.
    """
    config.set_from_pairs("augment=false, log_every=1, save_every=200")
    out = str(tmp_path / "run")
    trainer.train(synth_items(1, 3, synth_data.SynthConfig.from_settings()), out,
                  total_steps=200)
    with open(os.path.join(out, trainer.LOSS_LOG)) as f:
        losses = [float(line.split(",")[1]) for line in f.read().splitlines()[1:]]
    assert len(losses) == 200
    start = sum(losses[:10]) / 10
    below = sum(loss < start for loss in losses)
    assert below >= 0.9 * len(losses)
    assert sum(losses[-10:]) / 10 < 0.5 * start
