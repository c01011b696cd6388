"""Shared fixtures: small rendered datasets and toy training inputs."""

import numpy as np
import pytest

from cellwatch import dataset as cw_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """40 rendered samples (20 baseline / 20 runaway) at 64 px."""
    return cw_dataset.generate_dataset(root_seed=901, n_baseline=20, n_runaway=20, image_size=64)


@pytest.fixture(scope="session")
def toy_inputs():
    """Linearly separable 16-sample blob task: (inputs (16,3,16,16), labels)."""
    rng = np.random.default_rng(7)
    n, size = 16, 16
    x = rng.normal(0.0, 0.05, size=(n, 3, size, size)).astype(np.float32)
    labels = np.array([i % 2 for i in range(n)], dtype=np.int64)
    for i in range(n):
        if labels[i] == 1:
            x[i, :, 4:12, 4:12] += 1.0
    return x, labels
