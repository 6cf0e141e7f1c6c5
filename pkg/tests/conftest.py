"""Pytest configuration helpers.

This conftest ensures the project root is on `sys.path` so tests can import
the `src` package regardless of how pytest is invoked in different CI or IDE
environments. It also provides small shared models and images.
"""
import os
import sys

import numpy as np
import pytest


ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.models import ModelSpec, init_uniform  # noqa: E402


@pytest.fixture
def tiny_spec():
    """2x3 single-channel input, 5 hidden units, 3 classes."""
    return ModelSpec.mlp(input_shape=(2, 3, 1), class_count=3, hidden_sizes=(5,))


@pytest.fixture
def tiny_model(tiny_spec):
    return init_uniform(tiny_spec, seed=7)


@pytest.fixture
def desk_spec():
    """The 8x8 desk-scale MLP used by end-to-end runs."""
    return ModelSpec.mlp(input_shape=(8, 8, 1), class_count=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
