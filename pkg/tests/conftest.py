"""Shared fixtures: small deterministic nets and datasets."""

import numpy as np
import pytest

import swaat
from swaat import train as train_mod
from swaat.attack import AttackConfig


SMALL_SHAPE = (1, 8, 8)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small synthetic dataset on 8x8 images, moderate difficulty."""
    return swaat.synth_dataset(7, 200, classes=4, difficulty=0.5, shape=SMALL_SHAPE)


@pytest.fixture(scope="session")
def easy_dataset():
    """Linearly separable dataset (difficulty 0)."""
    return swaat.synth_dataset(11, 120, classes=4, difficulty=0.0, shape=SMALL_SHAPE)


@pytest.fixture(scope="session")
def trained_mlp(tiny_dataset):
    """An mlp-tiny trained briefly with PGD-AT on the tiny dataset.

    Session-scoped so attack tests that need a non-degenerate model share it.
    """
    net = swaat.make_net("mlp-tiny", SMALL_SHAPE, tiny_dataset.classes, seed=3)
    cfg = train_mod.TrainConfig(
        epochs=8, batch_size=50, base_lr=0.05, seed=3,
        attack=AttackConfig(epsilon=0.05, alpha=0.0125, steps=5),
        eval_attack=None,
    )
    train_mod.train_pgd_at(net, tiny_dataset, tiny_dataset, cfg)
    return net


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
