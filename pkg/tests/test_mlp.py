import math

import numpy as np
import pytest

from exposure_lab.data import GaussianDataSpec, make_data
from exposure_lab.denoiser import analytic_eps
from exposure_lab.mlp import (MLP, MlpDenoiser, TrainConfig, load_weights, mlp_eps, save_weights,
                              silu, silu_grad, train_mlp, write_loss_curve)
from exposure_lab.schedule import default_linear_schedule

SCHED = default_linear_schedule(1000)
UNIT = GaussianDataSpec.standard(1)


@pytest.fixture(scope="module")
def unit_model():
    return train_mlp(UNIT.sample, SCHED, 1, TrainConfig(steps=3000, seed=0))


def test_silu_grad_matches_finite_difference():
    z = np.linspace(-4, 4, 41)
    h = 1e-6
    np.testing.assert_allclose(silu_grad(z), (silu(z + h) - silu(z - h)) / (2 * h), rtol=1e-6, atol=1e-9)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = MLP.init([3, 5, 4, 2], rng)
    h_in = rng.standard_normal((7, 3))
    dout = rng.standard_normal((7, 2))
    out, pre, acts = net.forward(h_in, keep=True)
    grads = net.backward(pre, acts, dout)
    h = 1e-6
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 5)):
            old = flat[i]
            flat[i] = old + h
            up = np.sum(dout * net.forward(h_in))
            flat[i] = old - h
            down = np.sum(dout * net.forward(h_in))
            flat[i] = old
            assert g.reshape(-1)[i] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-7)


def test_zero_weights_give_output_bias():
    net = MLP.init([3, 8, 2], np.random.default_rng(0))
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = [0.25, -0.5]
    model = MlpDenoiser(net, SCHED)
    x = np.random.default_rng(1).standard_normal((4, 2))
    np.testing.assert_array_equal(mlp_eps(model, x, 10).eps, np.tile([0.25, -0.5], (4, 1)))


def test_forward_is_deterministic(unit_model):
    x = np.linspace(-2, 2, 9)[:, None]
    a, b = mlp_eps(unit_model.model, x, 123), mlp_eps(unit_model.model, x, 123)
    assert np.array_equal(a.eps, b.eps)


def test_dimension_mismatch(unit_model):
    with pytest.raises(ValueError):
        mlp_eps(unit_model.model, np.zeros((2, 3)), 5)


def test_zero_steps_returns_initialisation():
    res = train_mlp(UNIT.sample, SCHED, 1, TrainConfig(steps=0, seed=4, hidden=(8, 8)))
    ref = MLP.init([2, 8, 8, 1], np.random.default_rng(4))
    for a, b in zip(res.model.net.params(), ref.params()):
        assert np.array_equal(a, b)


def test_unit_gaussian_fit(unit_model):
    model = unit_model.model
    assert unit_model.final_loss < unit_model.initial_loss
    for x in (-1.5, -1.0, -0.5, 0.5, 1.0):
        for t in (200, 800):
            got = mlp_eps(model, np.array([[x]]), t).eps[0, 0]
            want = math.sqrt(1 - SCHED.alpha_bar(t)) * x
            assert got == pytest.approx(want, rel=0.10)
    rng = np.random.default_rng(9)
    x0, noise = rng.standard_normal((20_000, 1)), rng.standard_normal((20_000, 1))
    for t in (1, 50, 500, 1000):
        xt = SCHED.q_sample(x0, t, noise)
        err = np.mean((mlp_eps(model, xt, t).eps - analytic_eps(UNIT, SCHED, xt, t).eps) ** 2)
        assert err < 0.05


def test_mixture_beats_zero_predictor():
    res = train_mlp(make_data("mixture1d").sample, SCHED, 1, TrainConfig(steps=1500, seed=1))
    assert res.final_loss < 1.0


def test_nan_loss_aborts():
    def bad(rng, n):
        return np.full((n, 1), np.nan)

    with pytest.raises(FloatingPointError):
        train_mlp(bad, SCHED, 1, TrainConfig(steps=5))


def test_weights_round_trip(tmp_path, unit_model):
    path = tmp_path / "w.csv"
    save_weights(unit_model.model, path)
    text = path.read_text().splitlines()
    assert text[0] == "# exposure-lab mlp weights v1"
    back = load_weights(path, SCHED)
    x = np.linspace(-1, 1, 5)[:, None]
    assert np.array_equal(mlp_eps(back, x, 77).eps, mlp_eps(unit_model.model, x, 77).eps)
    with pytest.raises(ValueError):
        load_weights(path, default_linear_schedule(500))
    path.write_text("# exposure-lab mlp weights v9\n" + "\n".join(text[1:]))
    with pytest.raises(ValueError):
        load_weights(path, SCHED)


def test_loss_curve_csv(tmp_path, unit_model):
    write_loss_curve(unit_model.curve, tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == len(unit_model.curve) + 1
