"""Autodiff engine: op-level gradient checks against finite differences."""

import numpy as np
import pytest

from notemort.errors import ConfigurationError
from notemort.ndcore import Tensor, backward, concat, no_grad, parameter, stack

from oracles import finite_diff_grad, max_rel_err

TOL = 1e-4


def check_grad(build_loss, params, seed_note=""):
    loss = build_loss()
    backward(loss, params)
    for p in params:
        numeric = finite_diff_grad(build_loss, p)
        err = max_rel_err(p.grad, numeric)
        assert err < TOL, f"gradient mismatch {err:.2e} {seed_note}"
        p.grad = None


@pytest.mark.parametrize("seed", range(10))
def test_arithmetic_grads(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.standard_normal((3, 4)))
    b = parameter(rng.standard_normal((3, 4)))

    def loss():
        return ((a * b + a - b / (b * b + 2.0)) * (a + 1.5)).sum()

    check_grad(loss, [a, b])


@pytest.mark.parametrize("seed", range(10))
def test_matmul_broadcast_grads(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.standard_normal((2, 5, 3)))
    w = parameter(rng.standard_normal((3, 4)))

    def loss():
        return ((a @ w) ** 2).sum()

    check_grad(loss, [a, w])


@pytest.mark.parametrize("seed", range(10))
def test_nonlinearity_grads(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal(12) * 0.8)

    def loss():
        return (x.tanh() + x.sigmoid() * x.exp() + (x * x + 0.5).log()).sum()

    check_grad(loss, [x])


@pytest.mark.parametrize("seed", range(5))
def test_reduction_and_shape_grads(seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.standard_normal((4, 6)))

    def loss():
        pooled = x.mean(axis=0) + x.sum(axis=1, keepdims=True).reshape(4)[:3].sum()
        return (pooled * pooled).sum()

    check_grad(loss, [x])


@pytest.mark.parametrize("seed", range(5))
def test_concat_stack_pad_grads(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.standard_normal((3, 2)))
    b = parameter(rng.standard_normal((3, 5)))

    def loss():
        joined = concat([a, b], axis=1)
        piled = stack([joined, joined * 2.0], axis=0)
        return (piled.pad_axis(1, 2, axis=-1) ** 2).sum()

    check_grad(loss, [a, b])


def test_quadratic_form_gradient():
    w = parameter([1.0, -2.0, 3.0])
    loss = (w * w).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0, -4.0, 6.0])


def test_dead_branch_gets_zero_gradient():
    w = parameter([1.0, 2.0])
    unused = parameter([3.0])
    loss = (w * w).sum()
    backward(loss, [w, unused])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_nonscalar_loss_rejected():
    w = parameter([1.0, 2.0])
    with pytest.raises(ConfigurationError):
        (w * w).backward()


def test_no_grad_builds_no_tape():
    w = parameter([1.0, 2.0])
    with no_grad():
        out = (w * w).sum()
    assert not out.requires_grad
    assert out._parents == ()
    out.backward()
    assert w.grad is None


def test_grad_accumulates_across_shared_use():
    w = parameter([2.0])
    loss = (w * w + w * 3.0).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [7.0])


def test_getitem_gradient_scatter():
    w = parameter(np.arange(6.0).reshape(2, 3))
    loss = (w[0, :] * 2.0).sum() + (w[0, 1:] * 1.0).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [[2.0, 3.0, 3.0], [0.0, 0.0, 0.0]])


def test_node_ids_increase_in_forward_order():
    a = parameter([1.0])
    b = a * 2.0
    c = b + 1.0
    assert a._id < b._id < c._id
