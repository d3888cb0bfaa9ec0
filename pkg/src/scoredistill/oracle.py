"""Closed-form diffusion quantities for diagonal Gaussian mixtures.

Every noised marginal of a Gaussian mixture under a variance-preserving
forward process is again a Gaussian mixture::

    p_t(x) = sum_i w_i N(x; alpha_t mu_i, alpha_t^2 Sigma_i + sigma_t^2 I)

so scores, epsilon-predictions and implicit-classifier posteriors are all
available exactly. Functions here accept either one point ``x`` of shape
``(d,)`` or a batch of shape ``(n, d)``; ``t`` may be a scalar or a vector of
per-row times. Passing ``t=None`` evaluates the clean (t = 0) distribution.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConditionError, DimensionError, RangeError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# variance-preserving linear-beta schedule constants
_BETA_MIN = 0.1
_BETA_MAX = 20.0


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "vp_cosine"
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        if self.kind not in ("vp_cosine", "vp_linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise RangeError(
                f"schedule range must satisfy 0 < t_min < t_max < 1, got [{self.t_min}, {self.t_max}]"
            )


def _alpha_sigma(kind, t):
    if kind == "vp_cosine":
        half_pi_t = 0.5 * np.pi * t
        return np.cos(half_pi_t), np.sin(half_pi_t)
    log_alpha = -0.25 * t**2 * (_BETA_MAX - _BETA_MIN) - 0.5 * t * _BETA_MIN
    alpha = np.exp(log_alpha)
    # -expm1(2 log a) keeps sigma accurate near t = 0
    return alpha, np.sqrt(-np.expm1(2.0 * log_alpha))


def schedule_eval(sched: NoiseSchedule, t):
    """Return ``(alpha, sigma)`` at time(s) ``t``.

    Raises RangeError when any ``t`` lies outside ``[t_min, t_max]``.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < sched.t_min) or np.any(t_arr > sched.t_max) or np.any(np.isnan(t_arr)):
        raise RangeError(f"t outside schedule range [{sched.t_min}, {sched.t_max}]: {t}")
    alpha, sigma = _alpha_sigma(sched.kind, t_arr)
    if t_arr.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of axis-aligned Gaussians. Arrays are made read-only."""

    weights: np.ndarray
    means: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=float)
        var = np.array(self.cov_diag, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if var.ndim == 1:
            var = var[:, None]
        if mu.shape != var.shape or mu.shape[0] != w.shape[0]:
            raise DimensionError(
                f"weights {w.shape}, means {mu.shape} and cov_diag {var.shape} disagree"
            )
        if not 1 <= mu.shape[1] <= 8:
            raise DimensionError(f"mixture dimension must be in [1, 8], got {mu.shape[1]}")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise ValueError("covariance entries must be strictly positive")
        for name, arr in (("weights", w), ("means", mu), ("cov_diag", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_components(cls, components):
        """Build from a list of ``{"weight", "mean", "cov_diag"}`` mappings."""
        return cls(
            weights=[c["weight"] for c in components],
            means=[c["mean"] for c in components],
            cov_diag=[c["cov_diag"] for c in components],
        )

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def covariance_trace(self) -> float:
        """Trace of the full mixture covariance (within plus between components)."""
        mean = self.weights @ self.means
        second = self.weights @ (self.cov_diag.sum(axis=1) + (self.means**2).sum(axis=1))
        return float(second - mean @ mean)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cov_diag": self.cov_diag.tolist(),
        }


@dataclass(frozen=True)
class Condition:
    """A prompt analogue: a reweighting of mixture components.

    ``component_weights`` holds unnormalized conditional mixture weights
    p(i | y); use :meth:`subset` for the usual hard-subset prompt, which
    keeps the base weights on the chosen components.
    """

    kind: str = "unconditional"
    component_weights: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "unconditional":
            if self.component_weights is not None:
                raise ConditionError("unconditional condition takes no component weights")
        elif self.kind == "weighted":
            if self.component_weights is None:
                raise ConditionError("weighted condition needs component_weights")
            cw = tuple(float(c) for c in self.component_weights)
            if any(c < 0 or not np.isfinite(c) for c in cw):
                raise ConditionError("condition weights must be finite and non-negative")
            object.__setattr__(self, "component_weights", cw)
        else:
            raise ConditionError(f"unknown condition kind {self.kind!r}")

    @classmethod
    def unconditional(cls):
        return cls("unconditional")

    @classmethod
    def weighted(cls, weights: Sequence[float]):
        return cls("weighted", tuple(weights))

    @classmethod
    def subset(cls, gmm: GaussianMixture, indices: Sequence[int]):
        idx = sorted(set(int(i) for i in indices))
        if not idx or idx[0] < 0 or idx[-1] >= gmm.n_components:
            raise ConditionError(f"subset indices {list(indices)} invalid for {gmm.n_components} components")
        cw = np.zeros(gmm.n_components)
        cw[idx] = gmm.weights[idx]
        return cls("weighted", tuple(cw))

    def mixture_weights(self, gmm: GaussianMixture) -> np.ndarray:
        """Renormalized conditional component weights p(i | y)."""
        if self.kind == "unconditional":
            return gmm.weights.copy()
        cw = np.asarray(self.component_weights)
        if cw.shape[0] != gmm.n_components:
            raise ConditionError(
                f"condition has {cw.shape[0]} weights, mixture has {gmm.n_components} components"
            )
        total = cw.sum()
        if total <= 0:
            raise ConditionError("weighted condition has zero total mass")
        return cw / total

    def component_likelihoods(self, gmm: GaussianMixture) -> np.ndarray:
        """p(y | i), scaled so that the largest entry is exactly 1."""
        if self.kind == "unconditional":
            return np.ones(gmm.n_components)
        ratio = self.mixture_weights(gmm) / gmm.weights
        lik = ratio / ratio.max()
        lik[np.abs(lik - 1.0) <= 1e-12] = 1.0
        return lik

    def active_components(self, gmm: GaussianMixture) -> np.ndarray:
        return np.flatnonzero(self.mixture_weights(gmm) > 0)

    def to_dict(self):
        if self.kind == "unconditional":
            return {"kind": "unconditional"}
        return {"kind": "weighted", "weights": list(self.component_weights)}


def conditional_mixture(gmm: GaussianMixture, cond: Condition) -> GaussianMixture:
    """Clean conditional mixture; components with zero conditional weight are dropped."""
    w = cond.mixture_weights(gmm)
    keep = w > 0
    return GaussianMixture(w[keep] / w[keep].sum(), gmm.means[keep], gmm.cov_diag[keep])


@dataclass(frozen=True, eq=False)
class NoisyBatch:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    xt: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


def noisify(sched: NoiseSchedule, x0, t, eps) -> NoisyBatch:
    """Forward-diffuse ``x0`` with the given noise: ``xt = alpha x0 + sigma eps``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    if t.shape[0] == 1 and x0.shape[0] > 1:
        t = np.full(x0.shape[0], t[0])
    if t.shape[0] != x0.shape[0]:
        raise DimensionError(f"{t.shape[0]} times for {x0.shape[0]} rows")
    alpha, sigma = schedule_eval(sched, t)
    xt = alpha[:, None] * x0 + sigma[:, None] * eps
    return NoisyBatch(x0=x0.copy(), eps=eps.copy(), t=t.copy(), xt=xt)


def marginal_at(gmm: GaussianMixture, cond: Condition, t: float, sched: NoiseSchedule) -> GaussianMixture:
    """Noised conditional marginal at scalar time ``t``."""
    alpha, sigma = schedule_eval(sched, t)
    base = conditional_mixture(gmm, cond)
    return GaussianMixture(
        base.weights,
        alpha * base.means,
        alpha**2 * base.cov_diag + sigma**2,
    )


def _prepare(x, t, sched):
    """Coerce to a 2D batch with per-row (alpha, sigma)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    n = xb.shape[0]
    if t is None:
        alpha = np.ones(n)
        sigma = np.zeros(n)
    else:
        a, s = schedule_eval(sched, t)
        alpha = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        sigma = np.broadcast_to(np.asarray(s, dtype=float), (n,))
    return xb, alpha, sigma, single


def _component_terms(gmm, weights, xb, alpha, sigma):
    """Per-component log joint terms and whitened offsets.

    Returns ``(log_joint (n,K), diff/var (n,K,d), var (n,K,d))`` where
    ``log_joint[j, i] = log w_i + log N_i(x_j)``.
    """
    if xb.shape[1] != gmm.dim:
        raise DimensionError(f"point dimension {xb.shape[1]} != mixture dimension {gmm.dim}")
    a = alpha[:, None, None]
    var = a**2 * gmm.cov_diag[None] + (sigma**2)[:, None, None]
    diff = a * gmm.means[None] - xb[:, None, :]
    log_norm = -0.5 * np.sum(diff**2 / var + np.log(var) + LOG_2PI, axis=2)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w[None, :] + log_norm, diff / var, var


def _finish(arr, single):
    return arr[0] if single else arr


def responsibilities(gmm: GaussianMixture, cond: Condition, x, t=None, sched=None) -> np.ndarray:
    """Posterior component probabilities under the conditional marginal."""
    xb, alpha, sigma, single = _prepare(x, t, sched)
    log_joint, _, _ = _component_terms(gmm, cond.mixture_weights(gmm), xb, alpha, sigma)
    return _finish(softmax(log_joint, axis=1), single)


def log_density(gmm: GaussianMixture, cond: Condition, t, x, sched: Optional[NoiseSchedule] = None):
    """log p_t(x | cond)."""
    xb, alpha, sigma, single = _prepare(x, t, sched)
    log_joint, _, _ = _component_terms(gmm, cond.mixture_weights(gmm), xb, alpha, sigma)
    return _finish(logsumexp(log_joint, axis=1), single)


def score(gmm: GaussianMixture, cond: Condition, t, x, sched: Optional[NoiseSchedule] = None):
    """grad_x log p_t(x | cond) via mixture responsibilities."""
    xb, alpha, sigma, single = _prepare(x, t, sched)
    log_joint, whitened, _ = _component_terms(gmm, cond.mixture_weights(gmm), xb, alpha, sigma)
    resp = softmax(log_joint, axis=1)
    return _finish(np.einsum("nk,nkd->nd", resp, whitened), single)


def score_jacobian(gmm: GaussianMixture, cond: Condition, t, x, sched: Optional[NoiseSchedule] = None):
    """Hessian of log p_t(x | cond); shape ``(d, d)`` or ``(n, d, d)``."""
    xb, alpha, sigma, single = _prepare(x, t, sched)
    log_joint, whitened, var = _component_terms(gmm, cond.mixture_weights(gmm), xb, alpha, sigma)
    resp = softmax(log_joint, axis=1)
    mean_g = np.einsum("nk,nkd->nd", resp, whitened)
    second = np.einsum("nk,nkd,nke->nde", resp, whitened, whitened)
    curvature = np.einsum("nk,nkd->nd", resp, 1.0 / var)
    hess = second - mean_g[:, :, None] * mean_g[:, None, :]
    idx = np.arange(xb.shape[1])
    hess[:, idx, idx] -= curvature
    return _finish(hess, single)


def eps_oracle(gmm: GaussianMixture, cond: Condition, t, x, sched: Optional[NoiseSchedule] = None):
    """Exact epsilon-prediction ``-sigma_t * score``."""
    xb, alpha, sigma, single = _prepare(x, t, sched)
    s = score(gmm, cond, t, xb, sched)
    return _finish(-sigma[:, None] * s, single)


def log_cond_prob(gmm: GaussianMixture, cond: Condition, x, t=None, sched=None, return_flag=False):
    """log p(cond | x_t) by Bayes over the base mixture's components.

    Computed in log space, so it stays finite far into the tails. If the
    result is still non-finite (e.g. ``x`` at infinity) the value is
    replaced by ``-inf`` and flagged.
    """
    if cond.kind != "weighted":
        raise ConditionError("log_cond_prob needs a weighted condition")
    xb, alpha, sigma, single = _prepare(x, t, sched)
    lik = cond.component_likelihoods(gmm)
    if np.all(lik == 1.0):
        out = np.zeros(xb.shape[0])
        flags = np.zeros(xb.shape[0], dtype=bool)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_joint, _, _ = _component_terms(gmm, gmm.weights, xb, alpha, sigma)
            log_resp = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
            log_lik = np.log(lik)
            # every likelihood is <= 1, so only rounding can push this above 0
            out = np.minimum(logsumexp(log_resp + log_lik[None, :], axis=1), 0.0)
        flags = ~np.isfinite(out)
        if np.any(flags):
            logger.warning("log_cond_prob: %d non-finite value(s) replaced by -inf", int(flags.sum()))
            out = np.where(flags, -np.inf, out)
    value = _finish(out, single)
    if single:
        value = float(value)
    if return_flag:
        return value, (bool(flags[0]) if single else flags)
    return value


def sample_conditional(gmm: GaussianMixture, cond: Condition, n: int, rng_seed) -> np.ndarray:
    """Draw ``n`` i.i.d. clean samples from the conditional mixture."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    w = cond.mixture_weights(gmm)
    comp = rng.choice(gmm.n_components, size=n, p=w)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.sqrt(gmm.cov_diag[comp]) * z


@dataclass(eq=False)
class Oracle:
    """Frozen "pretrained model": a mixture plus schedule.

    ``eps`` memoizes its last few evaluations; ``evals`` counts the rows
    actually computed, which is what noise sharing saves.
    """

    gmm: GaussianMixture
    sched: NoiseSchedule
    cache_size: int = 8
    evals: int = 0
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)

    def eps(self, cond: Condition, t, x) -> np.ndarray:
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        tb = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
        key = (cond, xb.shape, xb.tobytes(), tb.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        out = eps_oracle(self.gmm, cond, tb, xb, self.sched)
        out.setflags(write=False)
        self.evals += xb.shape[0]
        self._cache[key] = out
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return out

    def eps_unc(self, t, x) -> np.ndarray:
        return self.eps(UNCONDITIONAL, t, x)

    def alpha_sigma(self, t):
        return schedule_eval(self.sched, t)


UNCONDITIONAL = Condition.unconditional()
