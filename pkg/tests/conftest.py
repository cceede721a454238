import numpy as np
import pytest

from stratrej import nn


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def smooth_point(model, rng, d, tries=1000, gap=1e-3):
    """A random input where every relu pre-activation is at least ``gap`` away from 0."""
    for _ in range(tries):
        x = rng.normal(size=d)
        _, pre = nn._forward_cache(model, x[None])
        if all(np.all(np.abs(p) > gap) for p, layer in zip(pre, model.layers) if layer.act == "relu"):
            return x
    raise RuntimeError("no smooth point found")


def linear_model(w, b):
    """Binary linear model whose logit difference (class 1 minus class 0) is w.x + b."""
    w = np.asarray(w, dtype=np.float64)
    return nn.Mlp((nn.Layer(np.stack([np.zeros_like(w), w]), [0.0, b], "id"),))


@pytest.fixture
def tiny_model():
    return nn.init_mlp([2, 16, 2], seed=3)


@pytest.fixture
def deep_model():
    return nn.init_mlp([2, 32, 32, 2], seed=4)
