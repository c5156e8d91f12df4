import numpy as np

from mtsconv.layers import Parameter
from mtsconv.optim import Adam


def test_zero_gradient_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    opt = Adam([p])
    for _ in range(5):
        opt.zero_grad()
        opt.step()
    assert np.array_equal(p.value, [1.0, -2.0, 3.0])


def test_first_step_magnitude():
    # with bias correction the first update is lr * g / (|g| + eps)
    p = Parameter(np.array([0.5]))
    opt = Adam([p], lr=1e-3)
    p.grad[:] = 1.0
    opt.step()
    assert abs(p.value[0] - (0.5 - 1e-3 / (1.0 + 1e-8))) < 1e-15


def test_weight_decay_shrinks_parameter():
    # zero data gradient; the L2 term alone drives the update
    p = Parameter(np.array([2.0]))
    opt = Adam([p], lr=1e-2, weight_decay=0.1)
    values = [p.value[0]]
    for _ in range(200):
        opt.zero_grad()
        opt.step()
        values.append(p.value[0])
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] < 0.5


def test_matches_scalar_recurrence_oracle():
    lr, b1, b2, eps, wd = 1e-3, 0.9, 0.999, 1e-8, 0.05
    rng = np.random.default_rng(0)
    grads = rng.normal(size=10)

    p = Parameter(np.array([0.7]))
    opt = Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)

    theta, m, v = 0.7, 0.0, 0.0
    for t, g_data in enumerate(grads, start=1):
        g = g_data + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

        p.grad[:] = g_data
        opt.step()
    assert abs(p.value[0] - theta) < 1e-14


def test_step_counter_increments():
    p = Parameter(np.zeros(2))
    opt = Adam([p])
    for want in range(1, 4):
        opt.step()
        assert opt.step_count == want
