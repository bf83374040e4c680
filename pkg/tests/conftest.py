"""Shared fixtures: small synthetic sites and fitted model families."""

import numpy as np
import pytest

from fedtree import SiteDataset, FitParams, fit_local, oracle_local


def synth_site(site_id, n, dim=3, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    z = rng.integers(0, 2, size=n)
    while z.sum() in (0, n):
        z = rng.integers(0, 2, size=n)
    tau = np.where(x[:, 0] > 0, 1.0 + shift, shift)
    y = 0.5 * x[:, 1] + z * tau + rng.normal(size=n)
    return SiteDataset(site_id, y, z, x)


@pytest.fixture
def toy_site():
    return synth_site(1, 120, seed=42)


@pytest.fixture(scope="session")
def model_family():
    """Five fitted ct models with mild cross-site disagreement."""
    models = [
        fit_local(
            synth_site(k, 150, seed=100 + k, shift=0.3 * (k % 2)),
            learner="ct",
            params=FitParams(min_leaf=20, prune=False, honest=True),
            seed=k,
        )
        for k in range(1, 6)
    ]
    return models


@pytest.fixture
def oracle_family():
    def tau_k(shift):
        return lambda X, s=shift: np.where(X[:, 0] > 0, 1.0 + s, s)

    return [oracle_local(k, tau_k(0.3 * (k % 2)), n_rows=150) for k in range(1, 6)]
