from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from scoredistill.oracle import Condition, GaussianMixture, NoiseSchedule, Oracle, noisify, schedule_eval

CONFIG_DIR_PATH = Path(__file__).resolve().parents[1] / "configs"


def random_mixture(rng, k=3, d=2, spread=2.0):
    w = rng.uniform(0.2, 1.0, size=k)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    means = rng.normal(0.0, spread, size=(k, d))
    var = rng.uniform(0.3, 1.5, size=(k, d))
    return GaussianMixture(w, means, var)


def random_condition(rng, gmm):
    """Either a hard subset or a random soft reweighting."""
    if rng.random() < 0.5:
        size = rng.integers(1, gmm.n_components)
        idx = rng.choice(gmm.n_components, size=size, replace=False)
        return Condition.subset(gmm, idx)
    cw = rng.uniform(0.0, 1.0, size=gmm.n_components)
    cw[rng.integers(gmm.n_components)] += 0.5
    return Condition.weighted(cw)


def reference_log_density(gmm, cond, t, x, sched):
    """Independent log p_t(x | cond) from scipy's normal log-pdf."""
    if t is None:
        alpha, sigma = 1.0, 0.0
    else:
        alpha, sigma = schedule_eval(sched, t)
    w = np.asarray(cond.mixture_weights(gmm), dtype=float)
    total = 0.0
    for wi, mu, var in zip(w, gmm.means, gmm.cov_diag):
        if wi == 0:
            continue
        sd = np.sqrt(alpha**2 * var + sigma**2)
        total += wi * np.exp(np.sum(norm.logpdf(x, loc=alpha * mu, scale=sd)))
    return np.log(total)


def central_grad(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sched():
    return NoiseSchedule()


@pytest.fixture
def two_modes():
    return GaussianMixture([0.5, 0.5], [[3.0, 0.0], [-3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])


@pytest.fixture
def oracle2(two_modes, sched):
    return Oracle(two_modes, sched)


def random_batch(rng, sched, n=8, d=2, scale=2.0):
    x0 = rng.normal(0.0, scale, size=(n, d))
    t = rng.uniform(sched.t_min, sched.t_max, size=n)
    eps = rng.standard_normal((n, d))
    return noisify(sched, x0, t, eps)
