"""Score-distillation update directions and discriminator losses.

Directions are per-sample vectors in x0-space; the generator pulls them
back through its Jacobian and descends. Discriminator losses return a
:class:`~scoredistill.phi_model.LossGraph` whose gradient flows only into
the fake-branch parameters; oracle predictions and the added noise are
constants.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .oracle import Condition, NoisyBatch, Oracle, log_cond_prob, score_jacobian
from .phi_model import LossGraph, ResidualEpsModel, eps_phi

logger = logging.getLogger(__name__)

METHODS = ("sds", "csd", "vsd", "asd", "dds", "asd_edit")
WEIGHTINGS = ("unit", "sigma_sq", "snr")
NO_DISC_METHODS = ("sds", "csd", "dds")

DEFAULT_LAMBDA = 7.5
DEFAULT_ETA = 0.5
GAMMA_2D = -1.0
GAMMA_3D = -0.5
# second (source-prompt) discriminator when editing
EDIT_SOURCE_ETA = 0.0
EDIT_SOURCE_GAMMA = 1.0

PhiLike = Union[ResidualEpsModel, np.ndarray]


@dataclass(frozen=True)
class DistillConfig:
    """Loss hyperparameters. ``lambda_`` is stored under the key ``lambda``."""

    lambda_: float = DEFAULT_LAMBDA
    eta: float = DEFAULT_ETA
    gamma: float = GAMMA_2D
    weighting: str = "unit"
    t_min: float = 0.02
    t_max: float = 0.98
    share_noise: bool = False
    disc_steps_per_gen_step: int = 1
    method: str = "asd"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")
        if not np.isfinite(self.lambda_) or self.lambda_ < 1:
            raise ConfigError(f"CFG scale lambda must be >= 1, got {self.lambda_}")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ConfigError(f"need 0 < t_min < t_max < 1, got [{self.t_min}, {self.t_max}]")
        steps = self.disc_steps_per_gen_step
        if int(steps) != steps or steps < 0:
            raise ConfigError(f"disc_steps_per_gen_step must be a non-negative integer, got {steps}")
        object.__setattr__(self, "disc_steps_per_gen_step", int(steps))
        if steps == 0 and self.method not in NO_DISC_METHODS:
            raise ConfigError(f"method {self.method!r} needs at least one discriminator step")
        if self.method == "vsd" and self.gamma != 0:
            if self.gamma != GAMMA_2D:
                logger.warning("method vsd forces gamma = 0 (config had %s)", self.gamma)
            object.__setattr__(self, "gamma", 0.0)

    @classmethod
    def from_mapping(cls, data) -> "DistillConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown distill keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return {"lambda": out.pop("lambda"), **out}

    def with_(self, **changes) -> "DistillConfig":
        if "lambda" in changes:
            changes["lambda_"] = changes.pop("lambda")
        return replace(self, **changes)


def preset_2d(**overrides) -> DistillConfig:
    return DistillConfig(gamma=GAMMA_2D).with_(**overrides)


def preset_3d(**overrides) -> DistillConfig:
    return DistillConfig(gamma=GAMMA_3D).with_(**overrides)


@dataclass(eq=False)
class DirectionBatch:
    dirs: np.ndarray
    omega: np.ndarray
    components: Optional[dict] = None


def omega_weights(cfg: DistillConfig, oracle: Oracle, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if cfg.weighting == "unit":
        return np.ones_like(t)
    alpha, sigma = oracle.alpha_sigma(t)
    if cfg.weighting == "sigma_sq":
        return sigma**2
    return sigma**2 / alpha**2


def cfg_combine(eps_unc, eps_cond, lam):
    """Classifier-free guidance: ``eps_unc + lam * (eps_cond - eps_unc)``."""
    eps_unc = np.asarray(eps_unc, dtype=float)
    eps_cond = np.asarray(eps_cond, dtype=float)
    if eps_unc.shape != eps_cond.shape:
        raise DimensionError(f"{eps_unc.shape} vs {eps_cond.shape}")
    # exact endpoints, no rounding residue
    if lam == 1:
        return eps_cond.copy()
    if lam == 0:
        return eps_unc.copy()
    return eps_unc + lam * (eps_cond - eps_unc)


def _predict_fake(phi: PhiLike, batch: NoisyBatch, eps_unc) -> np.ndarray:
    if isinstance(phi, ResidualEpsModel):
        return eps_phi(phi, batch.xt, batch.t, eps_unc=eps_unc)
    fake = np.asarray(phi, dtype=float)
    if fake.shape != batch.xt.shape:
        raise DimensionError(f"fake prediction {fake.shape} vs batch {batch.xt.shape}")
    return fake


def _direction(omega, uncond, classifier, fake, dirs_core):
    return DirectionBatch(
        dirs=omega[:, None] * dirs_core,
        omega=omega,
        components={"uncond": uncond, "classifier": classifier, "fake": fake},
    )


def sds_direction(batch: NoisyBatch, cond: Condition, cfg: DistillConfig, oracle: Oracle) -> DirectionBatch:
    e_unc = oracle.eps_unc(batch.t, batch.xt)
    e_y = oracle.eps(cond, batch.t, batch.xt)
    guided = cfg_combine(e_unc, e_y, cfg.lambda_)
    omega = omega_weights(cfg, oracle, batch.t)
    return _direction(omega, e_unc, guided - e_unc, batch.eps, guided - batch.eps)


def csd_direction(batch: NoisyBatch, cond: Condition, cfg: DistillConfig, oracle: Oracle) -> DirectionBatch:
    e_unc = oracle.eps_unc(batch.t, batch.xt)
    e_y = oracle.eps(cond, batch.t, batch.xt)
    classifier = cfg.lambda_ * (e_y - e_unc)
    zeros = np.zeros_like(classifier)
    omega = omega_weights(cfg, oracle, batch.t)
    return _direction(omega, zeros, classifier, zeros, classifier)


def asd_gen_direction(
    batch: NoisyBatch, cond: Condition, cfg: DistillConfig, oracle: Oracle, phi: PhiLike
) -> DirectionBatch:
    """Generator direction with a learned fake branch.

    ``phi`` is normally a model; an array of fake predictions may be passed
    instead (passing ``batch.eps`` recovers the SDS direction).
    """
    e_unc = oracle.eps_unc(batch.t, batch.xt)
    e_y = oracle.eps(cond, batch.t, batch.xt)
    fake = _predict_fake(phi, batch, e_unc)
    guided = cfg_combine(e_unc, e_y, cfg.lambda_)
    omega = omega_weights(cfg, oracle, batch.t)
    return _direction(omega, e_unc, guided - e_unc, fake, guided - fake)


def edit_direction(
    batch: NoisyBatch,
    cond_y: Condition,
    cond_z: Condition,
    cfg: DistillConfig,
    oracle: Oracle,
    phi_y: PhiLike,
    phi_z: PhiLike,
) -> DirectionBatch:
    """Two-discriminator editing direction (target ``y``, source ``z``).

    The unconditional terms cancel, leaving
    ``omega * (lam (eps_y - eps_z) - eps_phi_y + eps_phi_z)``.
    """
    e_y = oracle.eps(cond_y, batch.t, batch.xt)
    e_z = oracle.eps(cond_z, batch.t, batch.xt)
    needs_unc = isinstance(phi_y, ResidualEpsModel) or isinstance(phi_z, ResidualEpsModel)
    e_unc = oracle.eps_unc(batch.t, batch.xt) if needs_unc else None
    fake_y = _predict_fake(phi_y, batch, e_unc)
    fake_z = _predict_fake(phi_z, batch, e_unc)
    classifier = cfg.lambda_ * (e_y - e_z)
    omega = omega_weights(cfg, oracle, batch.t)
    return _direction(omega, fake_z, classifier, fake_y, classifier - fake_y + fake_z)


def dds_direction(
    batch_g: NoisyBatch,
    batch_src: NoisyBatch,
    cond_y: Condition,
    cond_z: Condition,
    cfg: DistillConfig,
    oracle: Oracle,
) -> DirectionBatch:
    """Delta denoising: guided residual on the edit minus that on the source."""
    if batch_g.t.shape != batch_src.t.shape or not np.array_equal(batch_g.t, batch_src.t):
        raise ContractError("dds needs the generated and source batches to share t")
    if batch_g.eps.shape != batch_src.eps.shape or not np.array_equal(batch_g.eps, batch_src.eps):
        raise ContractError("dds needs the generated and source batches to share eps")
    g = cfg_combine(oracle.eps_unc(batch_g.t, batch_g.xt), oracle.eps(cond_y, batch_g.t, batch_g.xt), cfg.lambda_)
    s = cfg_combine(
        oracle.eps_unc(batch_src.t, batch_src.xt), oracle.eps(cond_z, batch_src.t, batch_src.xt), cfg.lambda_
    )
    omega = omega_weights(cfg, oracle, batch_g.t)
    return DirectionBatch(dirs=omega[:, None] * (g - s), omega=omega)


def disc_value(gmm, cond_y: Condition, cond_phi: Condition, x, t, sched):
    """Analytic discriminator ``log p(y | x_t) - log p(phi | x_t)``."""
    return log_cond_prob(gmm, cond_y, x, t, sched) - log_cond_prob(gmm, cond_phi, x, t, sched)


def _sq(a):
    return np.sum(a * a, axis=-1)


def _fit_grad(fake, eps, n):
    return 2.0 * (fake - eps) / n


def _penalty_grad(fake, cond_pred, weight, n):
    # d/d fake of weight * ||cond_pred - fake||^2
    return 2.0 * weight * (fake - cond_pred) / n


def _with_override(override, phi, batch, e_unc):
    return override if override is not None else _predict_fake(phi, batch, e_unc)


def disc_loss_textonly(
    batch_g: NoisyBatch,
    cond_y: Condition,
    cfg: DistillConfig,
    oracle: Oracle,
    phi: ResidualEpsModel,
    eps_phi_override=None,
) -> LossGraph:
    """Upper-bound discriminator loss that needs no real samples.

    ``mean ||eps_phi(x_g) - eps||^2 + gamma ||eps_y(x_g) - eps_phi(x_g)||^2``
    """
    n = len(batch_g)
    e_y = oracle.eps(cond_y, batch_g.t, batch_g.xt)
    e_unc = oracle.eps_unc(batch_g.t, batch_g.xt)
    fake = _with_override(eps_phi_override, phi, batch_g, e_unc)
    value = np.mean(_sq(fake - batch_g.eps) + cfg.gamma * _sq(e_y - fake))
    upstream = _fit_grad(fake, batch_g.eps, n) + _penalty_grad(fake, e_y, cfg.gamma, n)
    return LossGraph("textonly", float(value), [(batch_g.xt, batch_g.t, upstream)])


def disc_loss_full(
    batch_g: NoisyBatch,
    batch_r: NoisyBatch,
    cond_y: Condition,
    cfg: DistillConfig,
    oracle: Oracle,
    phi: ResidualEpsModel,
    eps_phi_override=None,
) -> LossGraph:
    """Complete discriminator loss using real samples ``batch_r``.

    ``eps_phi_override`` is a ``(fake_g, fake_r)`` pair of precomputed fake
    predictions; gradients are then taken at those values.
    """
    n = len(batch_g)
    if len(batch_r) != n:
        raise DimensionError(f"generated batch has {n} rows, real batch {len(batch_r)}")
    if not np.array_equal(batch_g.t, batch_r.t):
        raise ContractError("generated and real batches must share t")
    if cfg.share_noise and not np.array_equal(batch_g.eps, batch_r.eps):
        raise ContractError("share_noise requires identical eps for both batches")
    ey_g = oracle.eps(cond_y, batch_g.t, batch_g.xt)
    ey_r = oracle.eps(cond_y, batch_r.t, batch_r.xt)
    if eps_phi_override is not None:
        fake_g, fake_r = eps_phi_override
    else:
        fake_g = _predict_fake(phi, batch_g, oracle.eps_unc(batch_g.t, batch_g.xt))
        fake_r = _predict_fake(phi, batch_r, oracle.eps_unc(batch_r.t, batch_r.xt))
    value = np.mean(
        _sq(fake_g - batch_g.eps)
        - _sq(fake_r - batch_r.eps)
        + cfg.eta * _sq(ey_r - fake_r)
        + cfg.gamma * _sq(ey_g - fake_g)
    )
    up_g = _fit_grad(fake_g, batch_g.eps, n) + _penalty_grad(fake_g, ey_g, cfg.gamma, n)
    up_r = -_fit_grad(fake_r, batch_r.eps, n) + _penalty_grad(fake_r, ey_r, cfg.eta, n)
    return LossGraph("full", float(value), [(batch_g.xt, batch_g.t, up_g), (batch_r.xt, batch_r.t, up_r)])


def vsd_loss(batch: NoisyBatch, oracle: Oracle, phi: PhiLike) -> float:
    """Plain fake-branch denoising objective ``mean ||eps_phi - eps||^2``."""
    e_unc = oracle.eps_unc(batch.t, batch.xt) if isinstance(phi, ResidualEpsModel) else None
    fake = _predict_fake(phi, batch, e_unc)
    return float(np.mean(_sq(fake - batch.eps)))


def gamma_floor(
    batch_g: NoisyBatch,
    batch_r: NoisyBatch,
    cond_y: Condition,
    oracle: Oracle,
    phi: PhiLike,
    eta: float,
) -> float:
    """Smallest gamma keeping the penalty term non-negative (batch means).

    Returns ``-inf`` when the generated-branch mismatch is zero, in which
    case any gamma keeps the penalty non-negative.
    """
    if eta == 0:
        return 0.0
    e_unc_g = oracle.eps_unc(batch_g.t, batch_g.xt) if isinstance(phi, ResidualEpsModel) else None
    e_unc_r = oracle.eps_unc(batch_r.t, batch_r.xt) if isinstance(phi, ResidualEpsModel) else None
    if isinstance(phi, tuple):
        fake_g, fake_r = phi
    else:
        fake_g = _predict_fake(phi, batch_g, e_unc_g)
        fake_r = _predict_fake(phi, batch_r, e_unc_r)
    real_gap = np.mean(_sq(oracle.eps(cond_y, batch_r.t, batch_r.xt) - fake_r))
    fake_gap = np.mean(_sq(oracle.eps(cond_y, batch_g.t, batch_g.xt) - fake_g))
    if fake_gap == 0:
        logger.debug("gamma_floor: zero generated-branch mismatch")
        return -np.inf
    return float(-eta * real_gap / fake_gap)


def upper_bound_gap(u, v):
    """``||u||^2 + ||v||^2 - 0.5 ||u - v||^2`` along the last axis (always >= 0)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionError(f"{u.shape} vs {v.shape}")
    return _sq(u) + _sq(v) - 0.5 * _sq(u - v)


def diffusion_loss(batch: NoisyBatch, cond: Condition, cfg: DistillConfig, oracle: Oracle) -> np.ndarray:
    """Per-row weighted denoising loss ``omega ||eps_y(x_t) - eps||^2``."""
    e_y = oracle.eps(cond, batch.t, batch.xt)
    return omega_weights(cfg, oracle, batch.t) * _sq(e_y - batch.eps)


def diffusion_loss_grad_x0(
    batch: NoisyBatch, cond: Condition, cfg: DistillConfig, oracle: Oracle, drop_jacobian: bool = True
) -> np.ndarray:
    """Per-row gradient of :func:`diffusion_loss` w.r.t. ``x0``.

    With ``drop_jacobian`` the denoiser Jacobian and constant factors are
    dropped, giving ``omega (eps_y - eps)``; otherwise the exact chain rule
    ``2 omega alpha J^T (eps_y - eps)`` with ``J = -sigma * Hess log p_t``.
    """
    e_y = oracle.eps(cond, batch.t, batch.xt)
    omega = omega_weights(cfg, oracle, batch.t)
    resid = e_y - batch.eps
    if drop_jacobian:
        return omega[:, None] * resid
    alpha, sigma = oracle.alpha_sigma(batch.t)
    hess = score_jacobian(oracle.gmm, cond, batch.t, batch.xt, oracle.sched)
    jac = -sigma[:, None, None] * hess
    return 2.0 * (omega * alpha)[:, None] * np.einsum("nij,ni->nj", jac, resid)
