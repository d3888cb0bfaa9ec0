"""Per-step run metrics computed from closed-form mixture quantities."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Optional

import numpy as np

from ..oracle import (
    Condition,
    GaussianMixture,
    NoiseSchedule,
    conditional_mixture,
    log_cond_prob,
    log_density,
    responsibilities,
    schedule_eval,
)

# the discriminator-value monitor is read at this diffusion time
WGAN_PROBE_T = 0.5


@dataclass(frozen=True)
class MetricsRow:
    step: int
    cond_loglik: float
    classifier_conf: float
    spread_ratio: float
    churn: float
    mode_agreement: float
    wgan_value: float

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return dict(zip(self.field_names(), astuple(self)))

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in astuple(self))


def _log_classifier(gmm, cond, x, t=None, sched=None):
    if cond.kind == "unconditional":
        return np.zeros(np.atleast_2d(x).shape[0])
    return np.atleast_1d(log_cond_prob(gmm, cond, x, t, sched))


def compute_metrics(
    particles,
    gmm: GaussianMixture,
    cond: Condition,
    window: int,
    previous=None,
    step: int = 0,
    sched: Optional[NoiseSchedule] = None,
) -> MetricsRow:
    """Summarize a particle cloud against the conditional target.

    ``churn`` is the mean displacement since ``previous`` divided by
    ``window`` steps (0 when there is no previous snapshot). ``wgan_value``
    is the analytic discriminator with the fake branch proxied by the
    unconditional model, evaluated at the noise-free point ``alpha x0`` of
    the probe time.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("compute_metrics needs at least one particle")
    cond_loglik = float(np.mean(log_density(gmm, cond, None, x)))
    classifier_conf = float(np.mean(_log_classifier(gmm, cond, x)))

    target_trace = conditional_mixture(gmm, cond).covariance_trace()
    if x.shape[0] > 1:
        sample_trace = float(np.trace(np.atleast_2d(np.cov(x, rowvar=False))))
    else:
        sample_trace = 0.0
    spread_ratio = sample_trace / target_trace

    if previous is None:
        churn = 0.0
    else:
        prev = np.atleast_2d(np.asarray(previous, dtype=float))
        churn = float(np.mean(np.linalg.norm(x - prev, axis=1)) / window)

    active = cond.active_components(gmm)
    resp = responsibilities(gmm, Condition.unconditional(), x)
    mode_agreement = float(np.mean(np.isin(np.argmax(resp, axis=1), active)))

    if sched is None:
        sched = NoiseSchedule()
    alpha, _ = schedule_eval(sched, WGAN_PROBE_T)
    wgan_value = float(np.mean(_log_classifier(gmm, cond, alpha * x, WGAN_PROBE_T, sched)))

    return MetricsRow(
        step=int(step),
        cond_loglik=cond_loglik,
        classifier_conf=classifier_conf,
        spread_ratio=spread_ratio,
        churn=churn,
        mode_agreement=mode_agreement,
        wgan_value=wgan_value,
    )


# fraction of a run excluded from stability statistics
BURN_IN_FRACTION = 0.25


def burn_in_churn(rows, steps: int) -> float:
    """Mean logged churn over windows ending after the burn-in step."""
    start = BURN_IN_FRACTION * steps
    values = [r.churn for r in rows if r.step > start]
    if not values:
        raise ValueError(f"no metrics rows after burn-in step {start:g}")
    return float(np.mean(values))
