"""Finite-difference verification of every differentiable op.

Analytic gradients come from the float32 production backward pass; the
oracle recomputes perturbed forward passes in float64 (central differences,
h=1e-3) and requires max relative error < 1e-3.
"""

import numpy as np
import pytest

from conftest import assert_grads_close
from histotex.tensor import (
    Tensor,
    adaptive_pool_pair,
    batch_norm_1d,
    concat_channels,
    conv2d,
    linear,
    maxpool2d,
    relu,
    softmax_cross_entropy,
    sum_all,
    weighted_sum,
)

SEEDS = range(10)


def _spread(gen, shape, gap=0.05):
    """Values with pairwise gaps well above 2h so argmax choices are FD-stable."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap
    return gen.permutation(vals).reshape(shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_grads(seed):
    gen = np.random.default_rng(seed)
    x = Tensor(gen.standard_normal((2, 3, 8, 8)), requires_grad=True)
    w = Tensor(gen.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(gen.standard_normal(4), requires_grad=True)
    assert_grads_close(lambda x, w, b: sum_all(conv2d(x, w, b, 2, 1)), [x, w, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_grads(seed):
    gen = np.random.default_rng(seed)
    vals = gen.uniform(0.01, 1.0, (4, 5)) * gen.choice([-1.0, 1.0], (4, 5))
    x = Tensor(vals, requires_grad=True)
    assert_grads_close(lambda x: sum_all(relu(x)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_grads(seed):
    gen = np.random.default_rng(seed)
    x = Tensor(_spread(gen, (2, 2, 7, 7)), requires_grad=True)
    assert_grads_close(lambda x: sum_all(maxpool2d(x, 3, 2, ceil_mode=True)), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_grads(seed):
    gen = np.random.default_rng(seed)
    a = Tensor(gen.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(gen.standard_normal((2, 3, 3, 3)), requires_grad=True)

    def f(a, b):
        cat = concat_channels(a, b)
        w = np.linspace(-1, 1, cat.size).reshape(cat.shape)
        return weighted_sum(cat, w)

    assert_grads_close(f, [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_adaptive_pool_pair_grads(seed):
    gen = np.random.default_rng(seed)
    x = Tensor(_spread(gen, (2, 3, 5, 5)), requires_grad=True)

    def f(x):
        out = adaptive_pool_pair(x)
        w = np.linspace(0.5, 1.5, out.size).reshape(out.shape)
        return weighted_sum(out, w)

    assert_grads_close(f, [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_grads(seed):
    gen = np.random.default_rng(seed)
    x = Tensor(gen.standard_normal((3, 6)), requires_grad=True)
    w = Tensor(gen.standard_normal((4, 6)) * 0.5, requires_grad=True)
    b = Tensor(gen.standard_normal(4), requires_grad=True)

    def f(x, w, b):
        out = linear(x, w, b)
        wt = np.linspace(-1, 1, out.size).reshape(out.shape)
        return weighted_sum(out, wt)

    assert_grads_close(f, [x, w, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_train_grads(seed):
    gen = np.random.default_rng(seed)
    x = Tensor(gen.standard_normal((6, 4)) * 2 + 1, requires_grad=True)
    gamma = Tensor(gen.uniform(0.5, 1.5, 4), requires_grad=True)
    beta = Tensor(gen.standard_normal(4), requires_grad=True)

    def f(x, gamma, beta):
        out = batch_norm_1d(x, gamma, beta, np.zeros(4, np.float32),
                            np.ones(4, np.float32), mode="train")
        w = np.linspace(-1, 1, out.size).reshape(out.shape)
        return weighted_sum(out, w)

    assert_grads_close(f, [x, gamma, beta])


@pytest.mark.parametrize("seed", SEEDS)
def test_batch_norm_eval_grads(seed):
    gen = np.random.default_rng(seed)
    rm = gen.standard_normal(4).astype(np.float32)
    rv = gen.uniform(0.5, 2.0, 4).astype(np.float32)
    x = Tensor(gen.standard_normal((5, 4)), requires_grad=True)
    gamma = Tensor(gen.uniform(0.5, 1.5, 4), requires_grad=True)
    beta = Tensor(gen.standard_normal(4), requires_grad=True)

    def f(x, gamma, beta):
        out = batch_norm_1d(x, gamma, beta, rm, rv, mode="eval")
        w = np.linspace(-1, 1, out.size).reshape(out.shape)
        return weighted_sum(out, w)

    assert_grads_close(f, [x, gamma, beta])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_grads(seed):
    gen = np.random.default_rng(seed)
    logits = Tensor(gen.standard_normal((4, 6)), requires_grad=True)
    labels = gen.integers(0, 6, 4).tolist()
    assert_grads_close(lambda z: softmax_cross_entropy(z, labels)[0], [logits])
