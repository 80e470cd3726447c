# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.
import sys
from os.path import dirname, join, abspath

import numpy as np
import pytest

src_path = join(dirname(abspath(__file__)), "..")
sys.path.insert(0, src_path)

import src.settings as settings
import src.tensor as tensor

TINY_SETTINGS = ("embed_dim=8, heads=2, decoder_heads=2, msda_points=2, "
                 "encoder_units=1, num_decoders=3, num_queries=3, res_blocks=3, "
                 "image_height=32, image_width=32, points_k=64, batch_size=1, "
                 "total_steps=4, save_every=2, log_every=1, infer_short_side=0, "
                 "augment=false")
"""The smallest configuration that still exercises every module."""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow training and acceptance tests.")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains models; needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def clean_tape():
    """Forward passes without backward() leave entries on the global tape."""
    yield
    tensor.tape().clear()


@pytest.fixture
def config():
    """Default settings, without the user's config.ini; restored afterwards."""
    settings.save()
    settings.import_config(None)
    yield settings
    settings.restore()


@pytest.fixture
def tiny(config):
    """Default settings shrunk to TINY_SETTINGS."""
    settings.set_from_pairs(TINY_SETTINGS)
    settings.validate()
    return settings


@pytest.fixture
def float64():
    """Create tensors in 64 bits for the duration of the test."""
    tensor.tape().clear()
    with tensor.precision(np.float64):
        yield
    tensor.tape().clear()


def _gradcheck(fn, inputs, eps=1e-6, tol=1e-5, max_checks=None, seed=0):
    """
    Compare the gradients of the scalar fn() with respect to every tensor in
    inputs against central differences. Checks at most max_checks entries of
    each input, chosen at random, and returns the largest relative error.
    """
    for x in inputs:
        x.grad = None
    tensor.tape().clear()
    fn().backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, grad in zip(inputs, analytic):
        entries = np.arange(x.size)
        if max_checks is not None and x.size > max_checks:
            entries = rng.choice(x.size, max_checks, replace=False)
        for i in entries:
            # Index in place: reshape(-1) copies non-contiguous data.
            at = np.unravel_index(i, x.shape)
            original = x.data[at]
            with tensor.no_grad():
                x.data[at] = original + eps
                plus = fn().item()
                x.data[at] = original - eps
                minus = fn().item()
            x.data[at] = original
            numeric = (plus - minus) / (2 * eps)
            a = grad[at]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-2))
    assert worst <= tol, "max relative gradient error {}".format(worst)
    return worst


@pytest.fixture
def gradcheck(float64):
    return _gradcheck
