import numpy as np
import pytest

from comodnet.controller import Controller, onehot

from helpers import fd_grad, rel_err


def test_onehot():
    assert np.array_equal(onehot(0, 3), [1, 0, 0])
    assert np.array_equal(onehot(2, 3), [0, 0, 1])
    assert onehot(1, 5).sum() == 1
    with pytest.raises(ValueError):
        onehot(3, 3)
    with pytest.raises(ValueError):
        onehot(-1, 3)


def test_zero_weights_identity_output():
    rng = np.random.default_rng(0)
    ctl = Controller(3, 4, rng, unit_gain_init=False)
    for layer in (ctl.fc1, ctl.fc2):
        layer.w.value[...] = 0.0
        layer.b.value[...] = 0.0
    assert np.all(ctl.forward(0) == 0.0)


def test_zero_weights_sigmoid_half():
    rng = np.random.default_rng(0)
    ctl = Controller(3, 4, rng, sigmoid_output=True, unit_gain_init=False)
    for layer in (ctl.fc1, ctl.fc2):
        layer.w.value[...] = 0.0
        layer.b.value[...] = 0.0
    assert np.allclose(ctl.forward(1), 0.5)


def test_hand_set_toy_instance():
    # 2 tasks, hidden 2, 2 channels; W1 routes each onehot to its own hidden
    # unit, W2 mixes hand-set values
    rng = np.random.default_rng(0)
    ctl = Controller(2, 2, rng, hidden=2, unit_gain_init=False)
    ctl.fc1.w.value[...] = np.array([[2.0, 0.0], [0.0, -3.0]], dtype=np.float32)
    ctl.fc1.b.value[...] = 0.0
    ctl.fc2.w.value[...] = np.array([[1.0, 0.5], [1.0, 1.0]], dtype=np.float32)
    ctl.fc2.b.value[...] = 0.0
    # task 0: hidden = relu([2,0]) = [2,0] -> context [2*1, 2*0.5] = [2,1]
    assert np.allclose(ctl.forward(0), [2.0, 1.0])
    # task 1: hidden = relu([0,-3]) = [0,0] -> context zeros
    assert np.allclose(ctl.forward(1), [0.0, 0.0])


def test_sigmoid_context_in_open_unit_interval():
    ctl = Controller(4, 8, np.random.default_rng(1), sigmoid_output=True)
    for k in range(4):
        ctx = ctl.forward(k)
        assert np.all(ctx > 0) and np.all(ctx < 1)


def test_deterministic_forward():
    ctl = Controller(4, 8, np.random.default_rng(1))
    assert np.array_equal(ctl.forward(2), ctl.forward(2))


def test_distinct_tasks_distinct_contexts():
    ctl = Controller(4, 8, np.random.default_rng(5))
    assert not np.array_equal(ctl.forward(0), ctl.forward(1))


def test_unit_gain_init_starts_near_one():
    ctl = Controller(3, 6, np.random.default_rng(2), unit_gain_init=True)
    ctx = ctl.forward(0)
    assert np.all(np.abs(ctx - 1.0) < 1.5)


@pytest.mark.parametrize("sigmoid", [False, True])
def test_controller_param_gradients_fd(sigmoid):
    rng = np.random.default_rng(9)
    ctl = Controller(3, 5, rng, sigmoid_output=sigmoid, unit_gain_init=False)
    r = rng.normal(size=5)
    task = 1

    ctl.forward(task)
    for p in ctl.params():
        p.zero_grad()
    ctl.backward(r.astype(np.float32))

    for p in ctl.params():
        value = p.value.copy()

        def loss_at_p(pv, p=p, value=value):
            p.value[...] = pv.astype(np.float32)
            out = float((ctl.forward(task).astype(np.float64) * r).sum())
            p.value[...] = value
            return out

        num = fd_grad(loss_at_p, value.astype(np.float64), quantized=True)
        assert rel_err(p.grad, num) < 1e-4, p.name
        assert np.linalg.norm(p.grad) > 0 or p.name.endswith("b")
