"""Checker-of-the-checker tests plus the primitive registry sweep."""

import numpy as np
import pytest

from brivl import autodiff as ad
from brivl.autodiff import Tensor
from brivl.gradcheck import (
    NondeterministicFunctionError,
    PRIMITIVE_CASES,
    check_primitives,
    finite_difference_check,
)


def test_sum_of_squares_below_1e4():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32))
    report = finite_difference_check(lambda t: ad.dot(t, t), x, name="sumsq")
    assert report.max_rel_error < 1e-4


def test_linear_function_error_is_rounding_level():
    w = Tensor(np.random.default_rng(1).normal(size=(7,)).astype(np.float32))
    x = Tensor(np.random.default_rng(2).normal(size=(7,)).astype(np.float32))
    report = finite_difference_check(lambda t: ad.dot(t, w), x, name="linear")
    assert report.max_rel_error < 1e-9


def test_layer_norm_block_below_1e3():
    g = Tensor(np.ones(6, dtype=np.float32))
    b = Tensor(np.zeros(6, dtype=np.float32))
    p = Tensor(np.random.default_rng(3).normal(size=(4, 6)).astype(np.float32))
    x = Tensor(np.random.default_rng(4).normal(size=(4, 6)).astype(np.float32))
    report = finite_difference_check(
        lambda t: ad.dot(ad.layer_norm(t, g, b), p), x, name="ln"
    )
    assert report.max_rel_error < 1e-3


def test_nondeterministic_function_rejected():
    state = {"count": 0}

    def flaky(t):
        state["count"] += 1
        return ad.mul(ad.tensor_sum(t), float(state["count"]))

    with pytest.raises(NondeterministicFunctionError):
        finite_difference_check(flaky, Tensor(np.ones(3)), name="flaky")


def test_report_max_equals_max_of_elements():
    x = Tensor(np.random.default_rng(5).normal(size=(4,)).astype(np.float32))
    report = finite_difference_check(lambda t: ad.dot(t, t), x, name="sq")
    assert report.max_rel_error == max(report.per_element)


def test_every_registered_primitive_passes():
    reports = check_primitives()
    names = [r.op_name for r in reports]
    assert len(names) == len(set(names)) == len(PRIMITIVE_CASES)
    failing = [r.op_name for r in reports if not r.passed(1e-3)]
    assert not failing, f"failing primitives: {failing}"


def test_corrupted_gradient_fails_the_check():
    # negative control: an op whose backward is deliberately wrong
    def bad_square(t):
        out = ad.mul(t, t)

        def bw():
            ad._accumulate(t, out.grad * 3.0 * t.data)  # should be 2x

        if out.requires_grad:
            out._backward = bw
        return ad.tensor_sum(out)

    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32))
    report = finite_difference_check(bad_square, x, name="bad_square")
    assert not report.passed(1e-3)


def test_rejects_non_scalar_outputs():
    with pytest.raises(ValueError, match="scalar"):
        finite_difference_check(lambda t: t, Tensor(np.ones(3)), name="ident")
