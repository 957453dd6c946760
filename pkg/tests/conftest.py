"""Shared fixtures: random similarity matrices and a fast experiment config."""

import os

import numpy as np
import pytest
import torch

from wood.config import ExperimentConfig
from wood.core import SimilarityMatrix
from wood.scenarios import SyntheticCorpusSpec


@pytest.fixture(autouse=True, scope="session")
def _ignore_ambient_output_dir():
    os.environ.pop("WOOD_OUTPUT_DIR", None)


def random_partition(rng, n, k):
    """Random ID/OOD index split of 0..n-1 with k OOD rows."""
    order = rng.permutation(n)
    ood = tuple(sorted(int(i) for i in order[:k]))
    ids = tuple(sorted(int(i) for i in order[k:]))
    return ids, ood


def random_similarity(rng, n, k, scale=0.95):
    """A valid similarity matrix with entries away from the clamp boundary."""
    entries = rng.uniform(-scale, scale, size=(n, n))
    ids, ood = random_partition(rng, n, k)
    sim = SimilarityMatrix(torch.tensor(entries, dtype=torch.float64), ids, ood)
    return sim, entries, ids, ood


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)


def micro_corpus_spec(**overrides):
    base = dict(
        n_categories=3,
        latent_dim=4,
        image_dim=10,
        text_dim=8,
        train_per_category=80,
        test_per_category=10,
        external_per_category=20,
        category_spread=1.0,
        latent_jitter=0.35,
        feature_noise=0.15,
        domain_shift=2.5,
    )
    base.update(overrides)
    return SyntheticCorpusSpec(**base)


def micro_config(out_dir, **overrides):
    """A config small enough that a full train+eval runs in about a second."""
    base = dict(
        seed=0,
        backend={"kind": "trainable_linear", "hidden_dim": 8},
        embedding_dim=6,
        margin=0.2,
        lam=0.8,
        gate_l1_weight=0.05,
        classifier_hidden=(16, 12, 8),
        learning_rate=5e-3,
        lr_step_epochs=1,
        batch_size=16,
        epochs=2,
        ood_fraction=0.02,
        noise_std=1.0,
        calibration_target=0.95,
        calibration_fraction=0.1,
        ood_train_pool_size=8,
        corpus=micro_corpus_spec(),
        output_dir=str(out_dir),
    )
    base.update(overrides)
    return ExperimentConfig(**base)
