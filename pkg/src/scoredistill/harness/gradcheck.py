"""Release-gate audit of every differentiable path and the reduction identities.

Failures are collected into the report rather than raised, so one broken
path does not hide the others.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List

import numpy as np

from ..distill import (
    DistillConfig,
    asd_gen_direction,
    cfg_combine,
    csd_direction,
    dds_direction,
    disc_loss_full,
    disc_loss_textonly,
    edit_direction,
    omega_weights,
    sds_direction,
    upper_bound_gap,
    vsd_loss,
)
from ..gen import make_warped, pullback, render
from ..oracle import Condition, GaussianMixture, NoiseSchedule, Oracle, noisify
from ..phi_model import finite_diff_verify, init_residual_zero

FD_STEP = 1e-4
FD_RTOL = 1e-4
EXACT_TOL = 1e-12
N_FD_BATCHES = 10
N_LATTICE_BATCHES = 100
N_GAP_PAIRS = 100_000
GAP_DIMS = (1, 2, 4, 8)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class GradcheckReport:
    seed: int
    checks: List[CheckResult] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def rows(self):
        return [(c.name, "pass" if c.passed else "FAIL", f"{c.worst:.3e}", c.detail) for c in self.checks]


def _random_problem(rng, dim=2):
    """A random mixture, a soft or hard condition and a matching oracle."""
    k = int(rng.integers(2, 5))
    w = rng.uniform(0.2, 1.0, size=k)
    means = rng.normal(0.0, 2.5, size=(k, dim))
    var = rng.uniform(0.3, 1.5, size=(k, dim))
    gmm = GaussianMixture(w / w.sum(), means, var)
    if rng.random() < 0.5:
        idx = rng.choice(k, size=int(rng.integers(1, k)), replace=False)
        cond = Condition.subset(gmm, idx)
    else:
        cw = rng.uniform(0.05, 1.0, size=k)
        cond = Condition.weighted(cw)
    return gmm, cond, Oracle(gmm, NoiseSchedule())


def _random_batch(rng, oracle, n=8, eps=None, t=None):
    sched = oracle.sched
    x0 = rng.normal(0.0, 2.5, size=(n, oracle.gmm.dim))
    if t is None:
        t = rng.uniform(sched.t_min, sched.t_max, size=n)
    if eps is None:
        eps = rng.standard_normal((n, oracle.gmm.dim))
    return noisify(sched, x0, t, eps)


def _trained_like_model(rng, oracle):
    # a zero output layer hides most of the backward pass, so perturb it
    model = init_residual_zero(oracle, rng)
    p = model.params.copy()
    out = model.layers(p)
    out[4][...] = rng.normal(0.0, 0.3, size=out[4].shape)
    out[5][...] = rng.normal(0.0, 0.1, size=out[5].shape)
    return model.with_params(p)


def _fd_check(name, reports) -> CheckResult:
    worst = max(r.max_rel_err for r in reports)
    bad = [i for i, r in enumerate(reports) if not r.passed]
    detail = f"{len(reports)} batches" + (f", failing batches {bad}" if bad else "")
    return CheckResult(name, not bad, worst, detail)


def check_textonly(rng) -> CheckResult:
    reports = []
    for _ in range(N_FD_BATCHES):
        _, cond, oracle = _random_problem(rng)
        cfg = DistillConfig(gamma=float(rng.uniform(-1.0, 1.0)))
        batch = _random_batch(rng, oracle)
        model = _trained_like_model(rng, oracle)
        loss = lambda m: disc_loss_textonly(batch, cond, cfg, oracle, m)  # noqa: E731
        reports.append(finite_diff_verify(loss, model, h=FD_STEP, tol=FD_RTOL, seed=rng.integers(2**32)))
    return _fd_check("disc_loss_textonly", reports)


def check_full(rng) -> CheckResult:
    reports = []
    for _ in range(N_FD_BATCHES):
        _, cond, oracle = _random_problem(rng)
        cfg = DistillConfig(eta=float(rng.uniform(0.0, 1.0)), gamma=float(rng.uniform(-1.0, 1.0)))
        batch_g = _random_batch(rng, oracle)
        batch_r = _random_batch(rng, oracle, t=batch_g.t)
        model = _trained_like_model(rng, oracle)
        loss = lambda m: disc_loss_full(batch_g, batch_r, cond, cfg, oracle, m)  # noqa: E731
        reports.append(finite_diff_verify(loss, model, h=FD_STEP, tol=FD_RTOL, seed=rng.integers(2**32)))
    return _fd_check("disc_loss_full", reports)


def check_pullback(rng) -> CheckResult:
    """Pullback against central differences of ``sum(dirs * render(theta))``."""
    worst, bad = 0.0, []
    for b in range(N_FD_BATCHES):
        dim = int(rng.integers(1, 5))
        gen = make_warped(dim, latent_dim=4, hidden=8, num_views=3, seed=rng.integers(2**32))
        view = int(rng.integers(gen.num_views))
        rows = np.arange(int(rng.integers(1, 9)))
        dirs = rng.standard_normal((rows.size, dim))
        analytic = pullback(gen, view, rows, dirs)
        theta = gen.theta.copy()

        def objective(th):
            gen.theta = th
            return float(np.sum(dirs * render(gen, view, rows)))

        value = objective(theta)
        atol = 1e-8 * max(1.0, abs(value))
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = FD_STEP
            numeric = (objective(theta + e) - objective(theta - e)) / (2 * FD_STEP)
            err = abs(analytic[i] - numeric) / (max(abs(analytic[i]), abs(numeric)) + atol)
            worst = max(worst, err)
            if err > FD_RTOL and b not in bad:
                bad.append(b)
        gen.theta = theta
    detail = f"{N_FD_BATCHES} batches" + (f", failing batches {bad}" if bad else "")
    return CheckResult("warped_pullback", not bad, worst, detail)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))


def _lattice_case(rng):
    _, cond, oracle = _random_problem(rng, dim=int(rng.integers(1, 5)))
    lam = float(rng.uniform(1.0, 30.0))
    cfg = DistillConfig(lambda_=lam, weighting=str(rng.choice(["unit", "sigma_sq", "snr"])))
    return cond, oracle, cfg, _random_batch(rng, oracle)


LATTICE: List[tuple] = []


def _identity(name):
    def register(fn: Callable):
        LATTICE.append((name, fn))
        return fn

    return register


@_identity("cfg_lambda_one")
def _cfg_one(rng):
    cond, oracle, _, batch = _lattice_case(rng)
    e_unc = oracle.eps_unc(batch.t, batch.xt)
    e_y = oracle.eps(cond, batch.t, batch.xt)
    return _max_abs(cfg_combine(e_unc, e_y, 1.0), e_y)


@_identity("asd_to_sds")
def _asd_sds(rng):
    cond, oracle, cfg, batch = _lattice_case(rng)
    asd = asd_gen_direction(batch, cond, cfg, oracle, batch.eps)
    return _max_abs(asd.dirs, sds_direction(batch, cond, cfg, oracle).dirs)


@_identity("asd_zero_phi_to_csd")
def _asd_csd(rng):
    cond, oracle, cfg, batch = _lattice_case(rng)
    phi = init_residual_zero(oracle, rng)
    asd = asd_gen_direction(batch, cond, cfg, oracle, phi)
    return _max_abs(asd.dirs, csd_direction(batch, cond, cfg, oracle).dirs)


@_identity("textonly_gamma0_to_vsd")
def _textonly_vsd(rng):
    cond, oracle, cfg, batch = _lattice_case(rng)
    phi = _trained_like_model(rng, oracle)
    graph = disc_loss_textonly(batch, cond, cfg.with_(gamma=0.0), oracle, phi)
    return abs(graph.value - vsd_loss(batch, oracle, phi))


@_identity("edit_cancellation")
def _edit_cancel(rng):
    cond_y, oracle, cfg, batch = _lattice_case(rng)
    k = oracle.gmm.n_components
    cond_z = Condition.weighted(rng.uniform(0.05, 1.0, size=k))
    fake_y = rng.standard_normal(batch.xt.shape)
    fake_z = rng.standard_normal(batch.xt.shape)
    got = edit_direction(batch, cond_y, cond_z, cfg, oracle, fake_y, fake_z).dirs
    e_unc = oracle.eps_unc(batch.t, batch.xt)
    g_y = cfg_combine(e_unc, oracle.eps(cond_y, batch.t, batch.xt), cfg.lambda_)
    g_z = cfg_combine(e_unc, oracle.eps(cond_z, batch.t, batch.xt), cfg.lambda_)
    omega = omega_weights(cfg, oracle, batch.t)[:, None]
    return _max_abs(got, omega * ((g_y - fake_y) - (g_z - fake_z)))


@_identity("dds_matched_pair")
def _dds_zero(rng):
    cond, oracle, cfg, batch = _lattice_case(rng)
    return _max_abs(dds_direction(batch, batch, cond, cond, cfg, oracle).dirs, 0.0)


def check_lattice(rng) -> List[CheckResult]:
    out = []
    for name, fn in LATTICE:
        worst = max(fn(rng) for _ in range(N_LATTICE_BATCHES))
        out.append(CheckResult(f"lattice:{name}", worst < EXACT_TOL, worst, f"{N_LATTICE_BATCHES} batches"))
    return out


def check_upper_bound(rng) -> CheckResult:
    worst = np.inf
    for d in GAP_DIMS:
        scale = np.exp(rng.uniform(-6.0, 6.0, size=(N_GAP_PAIRS, 1)))
        u = rng.standard_normal((N_GAP_PAIRS, d)) * scale
        v = rng.standard_normal((N_GAP_PAIRS, d)) * scale
        worst = min(worst, float(np.min(upper_bound_gap(u, v))))
    return CheckResult(
        "upper_bound_gap", worst >= -EXACT_TOL, worst, f"{N_GAP_PAIRS} pairs in d={list(GAP_DIMS)}; worst is min gap"
    )


def grad_check_suite(seed: int = 0) -> GradcheckReport:
    """Run every audit with a seeded stream; never raises on a failed check."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed=seed)
    for check in (check_textonly, check_full, check_pullback):
        try:
            report.checks.append(check(rng))
        except Exception as exc:  # reported, not thrown
            report.checks.append(CheckResult(check.__name__, False, np.inf, f"error: {exc!r}"))
    try:
        report.checks.extend(check_lattice(rng))
    except Exception as exc:
        report.checks.append(CheckResult("lattice", False, np.inf, f"error: {exc!r}"))
    try:
        report.checks.append(check_upper_bound(rng))
    except Exception as exc:
        report.checks.append(CheckResult("upper_bound_gap", False, np.inf, f"error: {exc!r}"))
    report.runtime = time.perf_counter() - started
    return report
