"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the package's own numerics: the matrix
exponential is a plain truncated power series, MMD is a double python loop,
and rotations for low dimensions come from closed-form trigonometry.
"""

import numpy as np
import pytest

from sitepool import autodiff as ad
from sitepool import data


def series_expm(mat: np.ndarray, terms: int = 40) -> np.ndarray:
    """Truncated power-series matrix exponential, no scaling tricks."""
    mat = np.asarray(mat, dtype=np.float64)
    n = mat.shape[0]
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms + 1):
        term = term @ mat / k
        result = result + term
    return result


def brute_mmd2(z1: np.ndarray, z2: np.ndarray, sigma: float,
               biased: bool = True) -> float:
    """Double-summation MMD^2 oracle with an explicit python loop."""
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))

    def k(a, b):
        d = a - b
        return np.exp(-0.5 * float(d @ d) / sigma ** 2)

    a, b = len(z1), len(z2)
    kxx = sum(k(z1[i], z1[j]) for i in range(a) for j in range(a))
    kyy = sum(k(z2[i], z2[j]) for i in range(b) for j in range(b))
    kxy = sum(k(z1[i], z2[j]) for i in range(a) for j in range(b))
    if biased:
        return kxx / a ** 2 + kyy / b ** 2 - 2.0 * kxy / (a * b)
    kxx_off = kxx - a  # diagonal kernel entries are exactly 1
    kyy_off = kyy - b
    return (kxx_off / (a * (a - 1)) + kyy_off / (b * (b - 1))
            - 2.0 * kxy / (a * b))


def rot2(theta: float) -> np.ndarray:
    """The 2x2 rotation matching the package's skew-coordinate convention."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


class StubNet:
    """Duck-typed network: a fixed function plus the widths the losses read."""

    def __init__(self, fn, widths):
        self.fn = fn
        self.spec = type("Spec", (), {"widths": tuple(widths)})()
        self.params = []

    def __call__(self, x):
        node = x if isinstance(x, ad.Node) else ad.constant(x)
        return self.fn(node)

    forward = __call__


def identity_net(dim: int) -> StubNet:
    return StubNet(lambda node: node, (dim, dim))


@pytest.fixture(scope="session")
def tiny_synth():
    """A small two-site synthetic dataset reused by several test modules."""
    cfg = data.SynthConfig(n_samples=240, n=4, feature_dim=8, kappa=1.0,
                           n_sites=2, site_bias=0.3, noise_sigma=0.05,
                           covariate_overlap=0.0, seed=7)
    dataset, truth = data.gen_synthetic(cfg)
    return cfg, dataset, truth


@pytest.fixture(scope="session")
def tiny_splits(tiny_synth):
    _, dataset, _ = tiny_synth
    return data.split_site_dataset(dataset, data.SplitSpec(seed=0))
