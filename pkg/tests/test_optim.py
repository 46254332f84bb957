import numpy as np
import pytest

from services.optim import AdamState, adam_step, zero_grad
from services.tensor import Tensor


def test_first_step_moves_by_lr_against_gradient():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([0.5, -2.0])
    state = AdamState(lr=0.1)
    adam_step([p], state)
    # 第一步 m_hat = g，v_hat = g²，更新量为 lr·g/(|g|+eps)
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
    assert state.step_count == 1


def test_missing_gradient_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True, name="head.weight")
    with pytest.raises(RuntimeError, match="head.weight"):
        adam_step([p], AdamState())


def test_minimizes_quadratic():
    p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    target = np.array([3.0, -1.0, 0.5])
    state = AdamState(lr=0.05)
    for _ in range(2000):
        zero_grad([p])
        ((p - target) * (p - target)).sum().backward()
        adam_step([p], state)
    np.testing.assert_allclose(p.data, target, atol=0.05)


def test_zero_grad_clears():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.ones(2)
    zero_grad([p])
    assert p.grad is None


def test_buffer_count_mismatch():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    a.grad = b.grad = np.ones(2)
    state = AdamState()
    adam_step([a], state)
    with pytest.raises(ValueError):
        adam_step([a, b], state)


def test_float32_parameters_stay_float32():
    p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    p.grad = np.full(4, 0.3, dtype=np.float32)
    state = AdamState()
    adam_step([p], state)
    assert p.dtype == np.float32
    assert state.first_moment[0].dtype == np.float32 and state.second_moment[0].dtype == np.float32


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True, dtype=np.float64)
    before = p.data.copy()
    state = AdamState()
    for _ in range(3):
        p.grad = np.zeros(3)
        adam_step([p], state)
    np.testing.assert_array_equal(p.data, before)


def test_default_lr_first_and_second_steps():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    state = AdamState()
    g1, g2 = np.array([0.2, -3.0]), np.array([-0.1, 1.0])

    p.grad = g1
    adam_step([p], state)
    # 第一步位移约等于 lr，方向与梯度相反
    np.testing.assert_allclose(p.data, [1.0 - 3e-4, -2.0 + 3e-4], atol=1e-9)

    p.grad = g2
    adam_step([p], state)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    step1 = 3e-4 * g1 / (np.abs(g1) + 1e-8)
    expected = np.array([1.0, -2.0]) - step1 - 3e-4 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=1e-15)
    assert state.step_count == 2
