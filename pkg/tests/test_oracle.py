import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_grad, random_condition, random_mixture, reference_log_density
from scoredistill.errors import ConditionError, DimensionError, RangeError
from scoredistill.oracle import (
    Condition,
    GaussianMixture,
    NoiseSchedule,
    Oracle,
    conditional_mixture,
    eps_oracle,
    log_cond_prob,
    log_density,
    marginal_at,
    noisify,
    responsibilities,
    sample_conditional,
    schedule_eval,
    score,
    score_jacobian,
)

STD_NORMAL_2D = GaussianMixture([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
UNC = Condition.unconditional()


def rel_close(a, b, rtol=1e-4, atol=1e-10):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    return np.max(np.abs(a - b)) <= rtol * scale + atol


# schedules


def test_cosine_closed_form_at_one_third(sched):
    alpha, sigma = schedule_eval(sched, 1 / 3)
    assert alpha == pytest.approx(math.cos(math.pi / 6), abs=1e-15)
    assert sigma == pytest.approx(0.5, abs=1e-15)


def test_cosine_at_t_min(sched):
    alpha, sigma = schedule_eval(sched, sched.t_min)
    assert alpha == pytest.approx(0.99950656, abs=1e-8)
    assert sigma == pytest.approx(0.03141076, abs=1e-8)


@pytest.mark.parametrize("kind", ["vp_cosine", "vp_linear"])
def test_vp_identity_ten_thousand_times(kind):
    sched = NoiseSchedule(kind)
    t = np.random.default_rng(7).uniform(sched.t_min, sched.t_max, size=10_000)
    alpha, sigma = schedule_eval(sched, t)
    assert np.max(np.abs(alpha**2 + sigma**2 - 1.0)) < 1e-12


@pytest.mark.parametrize("kind", ["vp_cosine", "vp_linear"])
def test_schedule_monotone(kind):
    sched = NoiseSchedule(kind)
    alpha, sigma = schedule_eval(sched, np.linspace(sched.t_min, sched.t_max, 2001))
    assert np.all(np.diff(alpha) <= 0)
    assert np.all(np.diff(sigma) >= 0)


@given(st.floats(0.02, 0.98), st.sampled_from(["vp_cosine", "vp_linear"]))
def test_scalar_in_scalar_out(t, kind):
    alpha, sigma = schedule_eval(NoiseSchedule(kind), t)
    assert isinstance(alpha, float) and isinstance(sigma, float)
    assert 0 < alpha < 1 and 0 < sigma < 1


@pytest.mark.parametrize("t", [0.0, 0.01, 0.99, 1.0, float("nan")])
def test_schedule_range_error(sched, t):
    with pytest.raises(RangeError):
        schedule_eval(sched, t)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.5), (0.5, 0.5), (0.6, 0.4), (0.1, 1.0)])
def test_schedule_rejects_bad_range(lo, hi):
    with pytest.raises(RangeError):
        NoiseSchedule(t_min=lo, t_max=hi)


# noisify


def test_noisify_zero_noise(sched, rng):
    x0 = rng.normal(size=(5, 3))
    t = rng.uniform(0.1, 0.9, size=5)
    b = noisify(sched, x0, t, np.zeros_like(x0))
    alpha, _ = schedule_eval(sched, t)
    np.testing.assert_array_equal(b.xt, alpha[:, None] * x0)


def test_noisify_unit_noise_arithmetic(sched):
    b = noisify(sched, np.zeros((1, 3)), [1 / 3], [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(b.xt, [[0.5, 0.0, 0.0]], atol=1e-15)


def test_noisify_near_t_min(sched, rng):
    x0 = rng.normal(size=(4, 2))
    eps = rng.normal(size=(4, 2))
    b = noisify(sched, x0, sched.t_min, eps)
    alpha, sigma = schedule_eval(sched, sched.t_min)
    bound = np.linalg.norm((1 - alpha) * x0, axis=1) + sigma * np.linalg.norm(eps, axis=1)
    assert np.all(np.linalg.norm(b.xt - x0, axis=1) <= bound + 1e-15)


def test_noisify_stores_inputs_unchanged(sched, rng):
    x0 = rng.normal(size=(3, 2))
    eps = rng.normal(size=(3, 2))
    t = np.array([0.1, 0.5, 0.9])
    b = noisify(sched, x0, t, eps)
    np.testing.assert_array_equal(b.x0, x0)
    np.testing.assert_array_equal(b.eps, eps)
    np.testing.assert_array_equal(b.t, t)
    x0[0, 0] = 99.0
    assert b.x0[0, 0] != 99.0


def test_noisify_shape_mismatch(sched):
    with pytest.raises(DimensionError):
        noisify(sched, np.zeros((3, 2)), [0.5] * 3, np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        noisify(sched, np.zeros((3, 2)), [0.5, 0.5], np.zeros((3, 2)))


# mixtures and conditions


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        GaussianMixture([1.0], [[0.0]], [[0.0]])
    with pytest.raises(DimensionError):
        GaussianMixture([1.0], [[0.0] * 9], [[1.0] * 9])
    with pytest.raises(DimensionError):
        GaussianMixture([0.5, 0.5], [[0.0, 1.0]], [[1.0, 1.0]])


def test_mixture_arrays_read_only(two_modes):
    with pytest.raises(ValueError):
        two_modes.means[0, 0] = 1.0


def test_condition_validation(two_modes):
    with pytest.raises(ConditionError):
        Condition.weighted([-1.0, 1.0])
    with pytest.raises(ConditionError):
        Condition.weighted([0.0, 0.0]).mixture_weights(two_modes)
    with pytest.raises(ConditionError):
        Condition.subset(two_modes, [2])
    with pytest.raises(ConditionError):
        Condition.weighted([1.0, 1.0, 1.0]).mixture_weights(two_modes)


def test_weighted_condition_renormalizes(two_modes):
    w = Condition.weighted([3.0, 1.0]).mixture_weights(two_modes)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(w, [0.75, 0.25])


def test_unconditional_mixture_is_base_exactly(rng):
    gmm = random_mixture(rng, k=4, d=3)
    np.testing.assert_array_equal(UNC.mixture_weights(gmm), gmm.weights)
    cm = conditional_mixture(gmm, UNC)
    np.testing.assert_array_equal(cm.means, gmm.means)
    np.testing.assert_array_equal(cm.weights, gmm.weights)


# marginals


def test_marginal_of_standard_normal_is_fixed(sched):
    for t in (0.02, 0.3, 0.77, 0.98):
        m = marginal_at(STD_NORMAL_2D, UNC, t, sched)
        np.testing.assert_allclose(m.means, 0.0, atol=0)
        np.testing.assert_allclose(m.cov_diag, 1.0, atol=1e-15)


def test_marginal_scales_mean():
    # cos(pi t / 2) = 0.8 gives sigma = 0.6
    sched = NoiseSchedule()
    t = 2 * math.acos(0.8) / math.pi
    mu = np.array([[1.5, -2.0]])
    m = marginal_at(GaussianMixture([1.0], mu, [[1.0, 1.0]]), UNC, t, sched)
    np.testing.assert_allclose(m.means, 0.8 * mu, atol=1e-15)
    np.testing.assert_allclose(m.cov_diag, 1.0, atol=1e-15)


def test_marginal_subset_keeps_one_component(two_modes, sched):
    m = marginal_at(two_modes, Condition.subset(two_modes, [1]), 0.4, sched)
    assert m.n_components == 1
    assert m.weights[0] == 1.0
    alpha, _ = schedule_eval(sched, 0.4)
    np.testing.assert_allclose(m.means[0], alpha * two_modes.means[1])


def test_marginal_endpoints(rng):
    gmm = random_mixture(rng, k=3, d=2)
    sched = NoiseSchedule(t_max=0.9999)
    alpha, _ = schedule_eval(sched, sched.t_min)
    lo = marginal_at(gmm, UNC, sched.t_min, sched)
    np.testing.assert_allclose(lo.means, alpha * gmm.means, rtol=0, atol=1e-15)
    _, sigma = schedule_eval(sched, sched.t_max)
    assert sigma**2 >= 1 - 1e-6
    hi = marginal_at(gmm, UNC, sched.t_max, sched)
    assert np.max(np.abs(hi.cov_diag - 1.0)) < 1e-6


def test_marginal_zero_weight_condition(two_modes, sched):
    with pytest.raises(ConditionError):
        marginal_at(two_modes, Condition.weighted([0.0, 0.0]), 0.5, sched)


# scores


def test_score_standard_normal(sched, rng):
    x = rng.normal(size=(6, 2))
    np.testing.assert_allclose(score(STD_NORMAL_2D, UNC, 0.37, x, sched), -x, atol=1e-14)


def test_score_symmetry(two_modes, sched):
    for t in (0.1, 0.5, 0.9):
        s = score(two_modes, UNC, t, np.array([0.0, 1.3]), sched)
        assert abs(s[0]) < 1e-14


def test_score_matches_fd_fixed_case(sched):
    gmm = random_mixture(np.random.default_rng(3), k=3, d=2)
    x = np.array([0.7, -0.2])
    fd = central_grad(lambda z: reference_log_density(gmm, UNC, 0.4, z, sched), x)
    assert rel_close(score(gmm, UNC, 0.4, x, sched), fd)


def test_score_matches_fd_hundred_cases(sched):
    rng = np.random.default_rng(11)
    for _ in range(100):
        gmm = random_mixture(rng, k=int(rng.integers(1, 5)), d=int(rng.integers(1, 5)))
        cond = random_condition(rng, gmm) if gmm.n_components > 1 else UNC
        t = float(rng.uniform(sched.t_min, sched.t_max))
        x = rng.normal(0, 2, size=gmm.dim)
        fd = central_grad(lambda z: reference_log_density(gmm, cond, t, z, sched), x)
        assert rel_close(score(gmm, cond, t, x, sched), fd)


def test_log_density_matches_reference(sched, rng):
    for _ in range(20):
        gmm = random_mixture(rng, k=3, d=2)
        cond = random_condition(rng, gmm)
        x = rng.normal(0, 2, size=2)
        t = float(rng.uniform(0.05, 0.95))
        assert log_density(gmm, cond, t, x, sched) == pytest.approx(reference_log_density(gmm, cond, t, x, sched))


def test_score_jacobian_matches_fd(sched, rng):
    gmm = random_mixture(rng, k=3, d=3)
    x = rng.normal(size=3)
    hess = score_jacobian(gmm, UNC, 0.35, x, sched)
    fd = np.stack([central_grad(lambda z: score(gmm, UNC, 0.35, z, sched)[i], x) for i in range(3)])
    assert rel_close(hess, fd)
    np.testing.assert_allclose(hess, hess.T, atol=1e-12)


def test_responsibilities_sum_to_one(sched, rng):
    gmm = random_mixture(rng, k=5, d=3)
    x = rng.normal(0, 10, size=(500, 3))
    for t in (None, 0.1, 0.9):
        r = responsibilities(gmm, UNC, x, t, sched)
        assert np.max(np.abs(r.sum(axis=1) - 1.0)) < 1e-12


# eps oracle


def test_eps_standard_normal_value(sched):
    np.testing.assert_allclose(eps_oracle(STD_NORMAL_2D, UNC, 1 / 3, np.array([1.0, 0.0]), sched), [0.5, 0.0], atol=1e-15)


def test_eps_is_minus_sigma_score(sched, rng):
    gmm = random_mixture(rng)
    x = rng.normal(size=(4, 2))
    t = rng.uniform(0.1, 0.9, size=4)
    _, sigma = schedule_eval(sched, t)
    np.testing.assert_array_equal(eps_oracle(gmm, UNC, t, x, sched), -sigma[:, None] * score(gmm, UNC, t, x, sched))


def test_full_weight_condition_matches_unconditional(sched, rng):
    gmm = GaussianMixture([1.0], [[0.5, -1.0]], [[2.0, 0.5]])
    x = rng.normal(size=(5, 2))
    for cond in (Condition.weighted([3.0]), Condition.subset(gmm, [0])):
        np.testing.assert_array_equal(eps_oracle(gmm, cond, 0.6, x, sched), eps_oracle(gmm, UNC, 0.6, x, sched))


def test_eps_monte_carlo_denoising_identity(sched):
    rng = np.random.default_rng(2024)
    gmm = random_mixture(rng, k=3, d=2)
    n = 100_000
    x0 = sample_conditional(gmm, UNC, n, rng)
    eps = rng.standard_normal((n, 2))
    t = rng.uniform(sched.t_min, sched.t_max, size=n)
    xt = noisify(sched, x0, t, eps).xt
    pred = eps_oracle(gmm, UNC, t, xt, sched)
    diff = pred - eps
    stderr = diff.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(pred.mean(axis=0) - eps.mean(axis=0)) <= 3 * stderr)
    # the posterior mean is orthogonal to any function of x_t
    proj = diff * xt
    assert np.all(np.abs(proj.mean(axis=0)) <= 3 * proj.std(axis=0, ddof=1) / math.sqrt(n))


def test_oracle_cache_counts_rows(two_modes, sched, rng):
    o = Oracle(two_modes, sched)
    x = rng.normal(size=(8, 2))
    t = rng.uniform(0.1, 0.9, size=8)
    a = o.eps_unc(t, x)
    b = o.eps_unc(t, x)
    assert a is b and o.evals == 8
    assert not a.flags.writeable
    o.eps(Condition.subset(two_modes, [0]), t, x)
    assert o.evals == 16


# implicit classifier


def test_log_cond_prob_full_cover_is_zero(two_modes, rng):
    x = rng.normal(0, 5, size=(10, 2))
    for cond in (Condition.subset(two_modes, [0, 1]), Condition.weighted([1.0, 1.0])):
        assert np.all(log_cond_prob(two_modes, cond, x) == 0.0)


def test_log_cond_prob_equidistant(two_modes, sched):
    cond = Condition.subset(two_modes, [0])
    assert log_cond_prob(two_modes, cond, np.array([0.0, 0.7])) == pytest.approx(math.log(0.5), abs=1e-15)
    assert log_cond_prob(two_modes, cond, np.array([0.0, 0.7]), 0.5, sched) == pytest.approx(math.log(0.5), abs=1e-15)


def test_log_cond_prob_at_mode(two_modes):
    cond = Condition.subset(two_modes, [0])
    expected = -math.log1p(math.exp(-18.0))
    assert log_cond_prob(two_modes, cond, np.array([3.0, 0.0])) == pytest.approx(expected, rel=1e-12)


def test_log_cond_prob_nonpositive_for_hard_subsets(rng):
    gmm = random_mixture(rng, k=4, d=2)
    x = rng.normal(0, 4, size=(200, 2))
    for idx in ([0], [1, 2], [0, 3]):
        assert np.all(log_cond_prob(gmm, Condition.subset(gmm, idx), x) <= 0.0)


def test_log_cond_prob_far_tail_finite(two_modes):
    cond = Condition.subset(two_modes, [1])
    value, flag = log_cond_prob(two_modes, cond, np.array([400.0, 0.0]), return_flag=True)
    assert value == pytest.approx(-2400.0, rel=1e-9)
    assert not flag


def test_log_cond_prob_infinite_point_flagged(two_modes):
    cond = Condition.subset(two_modes, [1])
    value, flag = log_cond_prob(two_modes, cond, np.array([np.inf, 0.0]), return_flag=True)
    assert value == -np.inf and flag


def test_log_cond_prob_needs_weighted(two_modes):
    with pytest.raises(ConditionError):
        log_cond_prob(two_modes, UNC, np.zeros(2))


def test_bayes_cfg_identity_hundred_cases(sched):
    rng = np.random.default_rng(5)
    for _ in range(100):
        gmm = random_mixture(rng, k=int(rng.integers(2, 5)), d=int(rng.integers(1, 4)))
        cond = random_condition(rng, gmm)
        t = float(rng.uniform(sched.t_min, sched.t_max))
        x = rng.normal(0, 2, size=gmm.dim)
        _, sigma = schedule_eval(sched, t)
        lhs = eps_oracle(gmm, cond, t, x, sched) - eps_oracle(gmm, UNC, t, x, sched)
        grad = central_grad(lambda z: log_cond_prob(gmm, cond, z, t, sched), x)
        assert rel_close(lhs, -sigma * grad, atol=1e-9)


# sampling


def test_sample_mean_clt_bound():
    gmm = GaussianMixture([1.0], [[1.0, -2.0, 0.5]], [[0.5, 2.0, 1.0]])
    n = 100_000
    x = sample_conditional(gmm, UNC, n, 99)
    assert np.all(np.abs(x.mean(axis=0) - gmm.means[0]) <= 4 * math.sqrt(2.0 / n))


def test_sample_deterministic(two_modes):
    cond = Condition.subset(two_modes, [0])
    np.testing.assert_array_equal(sample_conditional(two_modes, cond, 50, 3), sample_conditional(two_modes, cond, 50, 3))


def test_sample_subset_lands_in_component(two_modes):
    cond = Condition.subset(two_modes, [1])
    x = sample_conditional(two_modes, cond, 10_000, 4)
    resp = responsibilities(two_modes, UNC, x)
    assert np.mean(np.argmax(resp, axis=1) == 1) >= 0.99


def test_sample_rejects_nonpositive_n(two_modes):
    with pytest.raises(ValueError):
        sample_conditional(two_modes, UNC, 0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_score_finite_everywhere(seed, d):
    rng = np.random.default_rng(seed)
    gmm = random_mixture(rng, k=3, d=d)
    x = rng.normal(0, 50, size=(4, d))
    sched = NoiseSchedule()
    assert np.all(np.isfinite(score(gmm, UNC, 0.3, x, sched)))
    assert np.all(np.isfinite(log_density(gmm, UNC, 0.3, x, sched)))
