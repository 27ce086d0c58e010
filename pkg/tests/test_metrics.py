import numpy as np
import pytest

from piadm.exact_law import GaussianLaw, w2_gaussian
from piadm.metrics import (ResidualTrace, fitted_exponent, mixture_moments, moment_summary, picard_rate,
                           sliced_w2)
from piadm.picard import ScoreHandle
from piadm.schedule import build_plan
from piadm.score_oracle import ScoreOracle, TargetSpec, ou_marginal
from piadm.sde_sampler import run_piadm_sde


def test_constant_samples_have_zero_spread():
    m = moment_summary(np.full((10, 3), 2.5))
    assert np.array_equal(m.mean, np.full(3, 2.5)) and np.all(m.cov == 0) and np.all(m.mean_se == 0)
    zm, zc = m.z_scores(np.full(3, 2.5), np.zeros((3, 3)))
    assert np.all(zm == 0) and np.all(zc == 0)


def test_standard_normal_moments():
    x = np.random.default_rng(0).standard_normal((100_000, 2))
    m = moment_summary(x)
    assert np.all(np.abs(m.mean) < 3 / np.sqrt(1e5))
    zm, zc = m.z_scores(np.zeros(2), np.eye(2))
    assert np.max(np.abs(zm)) < 4 and np.max(np.abs(zc)) < 4
    with pytest.raises(ValueError):
        moment_summary(x[:1])


def test_mixture_moments_against_closed_form():
    target = TargetSpec.mixture([[-1.0, 0.0], [2.0, 1.0]], [np.eye(2), 0.5 * np.eye(2)], [0.25, 0.75])
    mean, cov = mixture_moments(target)
    assert np.allclose(mean, [1.25, 0.75])
    x = target.sample(200_000, np.random.default_rng(1))
    zm, zc = moment_summary(x).z_scores(mean, cov)
    assert np.max(np.abs(zm)) < 4 and np.max(np.abs(zc)) < 4


def test_mixture_sampler_output_moments():
    target = TargetSpec.mixture([[-1.0], [1.5]], [[[0.3]], [[0.5]]], [0.4, 0.6])
    oracle = ScoreOracle(target, 6.0)
    plan = build_plan(6.0, 0.005, 12, 0.025, 8)
    samples, _ = run_piadm_sde(plan, oracle, seed=3, n_samples=10_000, chunk_size=5_000)
    reference = ou_marginal(target, plan.eta)
    zm, zc = moment_summary(samples).z_scores(reference.mean, reference.covariance)
    assert np.max(np.abs(zm)) < 4 and np.max(np.abs(zc)) < 4


def test_sliced_w2_properties():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((2000, 3))
    assert sliced_w2(a, a) == 0.0
    shift = np.array([0.3, -0.4, 0.0])
    assert sliced_w2(a, a + shift) <= np.linalg.norm(shift) + 1e-12
    b = rng.standard_normal((1500, 3)) * 1.3
    assert sliced_w2(a, b, seed=5) == pytest.approx(sliced_w2(b, a, seed=5), rel=1e-12)
    with pytest.raises(ValueError):
        sliced_w2(a, b[:, :2])


def test_sliced_w2_is_below_full_w2():
    rng = np.random.default_rng(4)
    p = GaussianLaw([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    q = GaussianLaw([1.0, 0.5], [[2.0, 0.3], [0.3, 0.5]])
    xa = rng.multivariate_normal(p.mean, p.cov, 10_000)
    xb = rng.multivariate_normal(q.mean, q.cov, 10_000)
    full = w2_gaussian(p, q)
    sliced = sliced_w2(xa, xb, n_projections=128)
    assert 0.3 * full < sliced < full


def test_one_dimensional_w2_uses_quantile_coupling():
    a = np.array([0.0, 1.0, 2.0, 3.0])
    b = np.array([10.0, 11.0])
    # unequal sizes: each point of b takes two quantile cells of a
    expected = np.sqrt(np.mean((a - np.repeat(b, 2)) ** 2))
    assert sliced_w2(a[:, None], b[:, None], n_projections=1) == pytest.approx(expected)


def test_picard_rate_of_geometric_history():
    rates = picard_rate(ResidualTrace([[1.0, 0.5] + [0.1 * 0.2 ** k for k in range(6)]]))
    assert rates[0] == pytest.approx(np.log(0.2), rel=1e-10)


def test_picard_rate_of_one_shot_convergence():
    plan = build_plan(1.0, 0.01, 1, 0.1, 4)
    zero = ScoreHandle(lambda t, x: np.zeros_like(x), 1, 0.0)
    _, report = run_piadm_sde(plan, zero, seed=0, n_samples=4)
    assert picard_rate(ResidualTrace.from_report(report)) == [float("-inf")]


def test_picard_rate_on_gaussian_target():
    oracle = ScoreOracle(TargetSpec.gaussian([0.0], [[0.8]]), 2.0)
    plan = build_plan(2.0, 0.01, 4, 0.05, 8)
    _, report = run_piadm_sde(plan, oracle, seed=0, n_samples=500)
    factor = oracle.lipschitz_bound ** 2 * 0.5 * np.exp(1.0)
    rates = picard_rate(ResidualTrace.from_report(report))
    assert all(np.exp(r) <= 2 * factor for r in rates)
    assert len(list(ResidualTrace.from_report(report, per_path=True).rows())) == 4 * 8


def test_fitted_exponent():
    xs = np.array([2, 8, 32, 128])
    assert fitted_exponent(xs, 3 * xs ** 0.5) == pytest.approx(0.5)
    assert fitted_exponent(xs, np.log(xs)) < 0.5
