import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feedcell.nn import (Adam, Mlp, adam_step, load_checkpoint, masked_softmax, save_checkpoint, sgd_step,
                         softmax)


def fd_param_check(net, x, dy, eps=1e-6):
    """Max relative error of backprop against central differences of <dy, net(x)>."""
    _, cache = net.forward_cache(x)
    grads = net.backward(cache, dy)
    flat = net.get_flat()
    analytic = np.concatenate([g.ravel() for g in grads])
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        f = flat.copy()
        f[i] += eps
        net.set_flat(f)
        up = np.sum(dy * net(x))
        f[i] -= 2 * eps
        net.set_flat(f)
        dn = np.sum(dy * net(x))
        numeric[i] = (up - dn) / (2 * eps)
    net.set_flat(flat)
    return np.max(np.abs(analytic - numeric) / np.maximum(1e-6, np.abs(analytic) + np.abs(numeric)))


@pytest.mark.parametrize("widths", [(3, 8, 4), (5, 6, 6, 2), (4, 1)])
def test_param_gradients(widths):
    rng = np.random.default_rng(sum(widths))
    net = Mlp(widths, rng)
    # random biases so no unit sits exactly at the ReLU kink
    net.set_flat(net.get_flat() + rng.normal(0, 0.1, net.n_params))
    x = rng.normal(size=(7, widths[0]))
    dy = rng.normal(size=(7, widths[-1]))
    assert fd_param_check(net, x, dy) <= 1e-4


def test_input_gradient():
    rng = np.random.default_rng(4)
    net = Mlp((3, 10, 2), rng)
    x = rng.normal(size=(1, 3))
    dy = np.array([[0.7, -1.3]])
    _, cache = net.forward_cache(x)
    g = net.input_gradient(cache, dy)
    for j in range(3):
        e = np.zeros_like(x)
        e[0, j] = 1e-6
        fd = (np.sum(dy * net(x + e)) - np.sum(dy * net(x - e))) / 2e-6
        assert g[0, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_shape_errors():
    net = Mlp((3, 4, 2))
    with pytest.raises(ValueError):
        net(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        Mlp((3,))
    with pytest.raises(ValueError):
        net.set_flat(np.zeros(3))
    with pytest.raises(FloatingPointError):
        sgd_step(net, [np.full_like(p, np.nan) for p in net.params], 0.1)


def test_sgd_and_adam_fit_linear_map():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 2))
    y = x @ np.array([[1.5], [-2.0]]) + 0.3
    for use_adam in (False, True):
        net = Mlp((2, 16, 1), np.random.default_rng(1))
        state = None
        for _ in range(1500):
            out, cache = net.forward_cache(x)
            g = net.backward(cache, 2 * (out - y) / len(x))
            if use_adam:
                state = adam_step(net, g, 1e-2, state)
            else:
                sgd_step(net, g, 0.05)
        assert np.mean((net(x) - y) ** 2) < 1e-3


def test_adam_first_step_is_lr_sized():
    p = [np.zeros(3)]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([1.0, -5.0, 0.01])])
    assert np.allclose(p[0], [-0.1, 0.1, -0.1], atol=1e-6)


def test_softmax_cases():
    assert np.allclose(softmax([1.0, 1.0]), [0.5, 0.5])
    assert np.allclose(softmax([0.0, np.log(3.0)]), [0.25, 0.75])
    p = masked_softmax([5.0, 1.0, 1.0], [False, True, True])
    assert p[0] == 0.0 and np.allclose(p[1:], 0.5)
    with pytest.raises(ValueError):
        masked_softmax([1.0], [False])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-1e3, 1e3))
def test_softmax_shift_invariance(v, c):
    assert np.allclose(softmax(np.array(v) + c), softmax(v), atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp((3, 5, 2), np.random.default_rng(2))
    path = save_checkpoint(tmp_path / "n.ckpt", net, {"kind": "itpg", "L": 4})
    net2, meta = load_checkpoint(path)
    assert meta == {"kind": "itpg", "L": 4}
    assert net2.widths == net.widths
    x = np.random.default_rng(3).normal(size=(4, 3))
    assert np.array_equal(net(x), net2(x))
