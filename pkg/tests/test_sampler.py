import math

import numpy as np
import pytest

from exposure_lab.data import GaussianDataSpec
from exposure_lab.denoiser import (AnalyticDenoiser, ConstantEps, EpsPrediction, ErrorProfile,
                                   NoisyOracle, NoisyOracleConfig)
from exposure_lab.sampler import (SamplerConfig, ddim_sigma, ddim_step, ddpm_step, euler_step, heun_step,
                                  record_to_csv, run_chain)
from exposure_lab.scaling import ScalingSchedule
from exposure_lab.schedule import default_linear_schedule, respace

PARENT = default_linear_schedule(1000)
GRID = respace(PARENT, 20)
S = GRID.effective
UNIT = GaussianDataSpec.standard(1)


def _exact(t, seed=0, n=6, dim=2):
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((n, dim)), rng.standard_normal((n, dim))
    x = S.q_sample(x0, t, eps)
    return x0, eps, x, EpsPrediction.from_eps(x, S.alpha_bar(t), eps)


def test_ddpm_step_with_exact_eps_is_posterior_mean():
    t = 9
    x0, _, x, pred = _exact(t)
    ab, ab_prev = S.alpha_bar(t), S.alpha_bar(t - 1)
    mean = (math.sqrt(ab_prev) * S.beta(t) / (1 - ab)) * x0 + (math.sqrt(S.alpha(t)) * (1 - ab_prev) / (1 - ab)) * x
    np.testing.assert_allclose(ddpm_step(x, t, pred, S, np.zeros_like(x)), mean, rtol=1e-12, atol=1e-13)


def test_ddpm_last_step_is_noiseless():
    _, _, x, pred = _exact(1)
    a = ddpm_step(x, 1, pred, S, np.zeros_like(x))
    b = ddpm_step(x, 1, pred, S, np.full_like(x, 5.0))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_step(x, 0, pred, S, None)


def test_ddim_deterministic_step_stays_on_path():
    t = 12
    x0, eps, x, pred = _exact(t)
    out = ddim_step(x, t, t - 1, pred, 0.0, S, None)
    ab_prev = S.alpha_bar(t - 1)
    np.testing.assert_allclose(out, math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps, atol=1e-12)


def test_ddim_rejects_negative_direction_variance():
    _, _, x, pred = _exact(5)
    with pytest.raises(ValueError):
        ddim_step(x, 5, 4, pred, 50.0, S, np.zeros_like(x))
    with pytest.raises(ValueError):
        ddim_step(x, 5, 5, pred, 0.0, S, None)


@pytest.mark.parametrize("t", [1, 2, 10, 20])
def test_ddim_eta_one_equals_ddpm_lower_bound(t):
    _, _, x, _ = _exact(t, seed=3)
    eps = np.random.default_rng(4).standard_normal(x.shape)
    pred = EpsPrediction.from_eps(x, S.alpha_bar(t), eps)
    noise = np.random.default_rng(5).standard_normal(x.shape)
    assert ddim_sigma(S, t, t - 1, 1.0) ** 2 == pytest.approx(S.posterior_var(t), abs=1e-15)
    np.testing.assert_allclose(ddim_step(x, t, t - 1, pred, 1.0, S, noise),
                               ddpm_step(x, t, pred, S, noise), atol=1e-10)


def test_heun_with_constant_eps_equals_euler():
    den = ConstantEps([0.3, -0.2], PARENT)
    x = np.random.default_rng(0).standard_normal((4, 2))

    def evaluate(xx, i, slot=0):
        p = den(xx, GRID.parent_t(i))
        return p, p

    for t in (20, 7, 2):
        h, trace = heun_step(x, t, t - 1, evaluate, S)
        e, _ = euler_step(x, t, t - 1, evaluate, S)
        assert len(trace) == 2
        np.testing.assert_allclose(h, e, rtol=1e-13, atol=1e-13)
    _, trace = heun_step(x, 1, 0, evaluate, S)
    assert len(trace) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig("dpm", GRID)
    with pytest.raises(ValueError):
        SamplerConfig("ddim", GRID, eta=1.5)


@pytest.mark.parametrize("kind", ["ddpm", "ddim", "euler", "heun"])
def test_unit_scaling_is_bitwise_identical(kind):
    den = AnalyticDenoiser(UNIT, PARENT)
    a = run_chain(SamplerConfig(kind, GRID, eta=0.5, seed=3), den, n=300)
    b = run_chain(SamplerConfig(kind, GRID, eta=0.5, scaling=ScalingSchedule.uniform(1.0, 20), seed=3), den, n=300)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.eps, b.eps)


def test_uniform_scaling_divides_eps_norm():
    den = AnalyticDenoiser(UNIT, PARENT)
    rec = run_chain(SamplerConfig("ddpm", GRID, scaling=ScalingSchedule.uniform(1.04, 20), seed=1), den, n=200)
    np.testing.assert_allclose(np.linalg.norm(rec.eps, axis=2), np.linalg.norm(rec.raw_eps, axis=2) / 1.04,
                               rtol=1e-14)


def test_heun_scales_both_evaluations():
    den = AnalyticDenoiser(UNIT, PARENT)
    lam = ScalingSchedule.linear(0.01, 1.0, 20)
    rec = run_chain(SamplerConfig("heun", GRID, scaling=lam, seed=1), den, n=50)
    plain = run_chain(SamplerConfig("heun", GRID, seed=1), den, n=50)
    assert not np.array_equal(rec.states[-1], plain.states[-1])
    for k, t in enumerate(rec.timesteps[:-1]):
        np.testing.assert_allclose(rec.eps[k], rec.raw_eps[k] / lam(int(t)), rtol=1e-14)
    assert np.all(np.isnan(rec.corrector_eps[-1]))


@pytest.mark.parametrize("kind", ["ddpm", "ddim", "heun"])
def test_thread_count_does_not_change_results(kind):
    den = AnalyticDenoiser(GaussianDataSpec([0.5, -1.0], [2.0, 0.5]), PARENT)
    cfg = SamplerConfig(kind, GRID, eta=0.3, seed=11)
    a = run_chain(cfg, den, n=5000, threads=1, block_size=512)
    b = run_chain(cfg, den, n=5000, threads=4, block_size=512)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.noise, b.noise)


def test_same_seed_same_trajectory_and_seed_matters():
    den = AnalyticDenoiser(UNIT, PARENT)
    a = run_chain(SamplerConfig("ddpm", GRID, seed=5), den, n=100)
    b = run_chain(SamplerConfig("ddpm", GRID, seed=5), den, n=100)
    c = run_chain(SamplerConfig("ddpm", GRID, seed=6), den, n=100)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_record_replays_from_eps_and_noise():
    cfg = SamplerConfig("ddpm", GRID, seed=2)
    den = NoisyOracle(NoisyOracleConfig(ErrorProfile("constant", 0.1)), PARENT)
    anchors = np.random.default_rng(0).standard_normal((64, 1))
    rec = run_chain(cfg, den, anchor_x0=anchors)
    assert rec.states.shape == (21, 64, 1)
    for k, t in enumerate(rec.timesteps[:-1]):
        t = int(t)
        pred = EpsPrediction.from_eps(rec.states[k], S.alpha_bar(t), rec.eps[k])
        np.testing.assert_allclose(ddpm_step(rec.states[k], t, pred, S, rec.noise[k]), rec.states[k + 1],
                                   rtol=1e-12, atol=1e-12)


def test_exact_eps_anchored_ddim_recovers_x0():
    full = respace(PARENT, 1000)
    den = NoisyOracle(NoisyOracleConfig(), PARENT)
    anchors = np.random.default_rng(1).standard_normal((32, 2))
    rec = run_chain(SamplerConfig("ddim", full, eta=0.0, seed=0), den, anchor_x0=anchors)
    np.testing.assert_allclose(rec.terminal, anchors, atol=1e-9)


def test_step_errors_name_the_timestep():
    class Broken:
        needs_anchor = False
        schedule = PARENT

        def __call__(self, x, t, *, anchor=None, rng=None):
            if t < 500:
                raise ValueError("boom")
            return EpsPrediction.from_eps(x, PARENT.alpha_bar(t), np.zeros_like(x))

    with pytest.raises(ValueError, match=r"t=9\b"):
        run_chain(SamplerConfig("ddpm", GRID), Broken(), n=4, dim=1)


def test_anchor_required():
    den = NoisyOracle(NoisyOracleConfig(), PARENT)
    with pytest.raises(ValueError):
        run_chain(SamplerConfig("ddpm", GRID), den, n=4, dim=1)


def test_record_csv(tmp_path):
    rec = run_chain(SamplerConfig("ddpm", GRID), AnalyticDenoiser(UNIT, PARENT), n=3)
    record_to_csv(rec, tmp_path / "c.csv", "# hdr\n")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "# hdr"
    assert lines[1] == "chain_id,t,x0,eps_norm"
    assert len(lines) == 2 + 3 * 21
    assert lines[-1].startswith("2,0,") and lines[-1].endswith(",")
