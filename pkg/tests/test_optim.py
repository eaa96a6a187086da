"""Adam behavior: trivial cases, closed-form first step, atomicity."""

import numpy as np
import numpy.testing as npt
import pytest

from brivl.autodiff import Tensor
from brivl.config import RunConfig
from brivl.optim import Adam, MissingGradientError


def test_zero_gradient_zero_decay_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(3, dtype=np.float32)
    before = p.data.copy()
    Adam([p], lr=0.1, weight_decay=0.0).step()
    npt.assert_array_equal(p.data, before)


def test_first_step_with_unit_gradient_moves_by_lr():
    # closed form: m_hat = g, v_hat = g^2, update = -lr * g/(|g| + eps)
    p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([1.0], dtype=np.float32)
    lr = 0.01
    Adam([p], lr=lr).step()
    npt.assert_allclose(p.data, [-lr], rtol=1e-5)


def test_missing_gradient_rejected_before_any_update():
    a = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    a.grad = np.ones(2, dtype=np.float32)
    before = a.data.copy()
    opt = Adam([a, b], lr=0.5)
    with pytest.raises(MissingGradientError):
        opt.step()
    npt.assert_array_equal(a.data, before)  # nothing was touched


def test_full_scale_reference_hyperparameters_accepted():
    cfg = RunConfig(lr=1e-4, weight_decay=1e-5)
    p = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
    p.grad = np.ones(1, dtype=np.float32)
    Adam([p], lr=cfg.lr, weight_decay=cfg.weight_decay).step()
    assert p.data[0] != 1.0


def test_weight_decay_pulls_toward_zero():
    p = Tensor(np.array([10.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1, weight_decay=0.1)
    for _ in range(50):
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
    assert abs(p.data[0]) < 10.0


def test_state_arrays_round_trip():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0, -1.0, 0.5], dtype=np.float32)
    opt.step()
    state = opt.state_arrays()
    p2 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    opt2 = Adam([p2], lr=0.1)
    opt2.load_state_arrays(state)
    assert opt2.t == opt.t
    npt.assert_array_equal(opt2.m[0], opt.m[0])
    npt.assert_array_equal(opt2.v[0], opt.v[0])
