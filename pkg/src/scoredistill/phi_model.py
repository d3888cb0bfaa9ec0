"""Trainable fake-branch epsilon predictor, its backprop, and Adam.

The predictor is the frozen unconditional oracle plus a small tanh MLP
residual whose output layer starts at zero, so a fresh model reproduces the
pretrained unconditional prediction exactly (the LoRA-branch analogue).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, List, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .oracle import Oracle

HIDDEN = (64, 64)
_MAGIC = b"ASDPHI01"
_HEADER = struct.Struct("<8sHHHH")  # magic, dim, input width, hidden1, hidden2


def _layer_shapes(dim, hidden=HIDDEN):
    n_in = dim + 3
    h1, h2 = hidden
    return [(n_in, h1), (h1,), (h1, h2), (h2,), (h2, dim), (dim,)]


@dataclass(eq=False)
class ResidualEpsModel:
    """``eps_phi(x, t) = eps_unc(x, t) + MLP([x, t, alpha, sigma])``."""

    oracle: Oracle
    params: np.ndarray
    hidden: tuple = HIDDEN
    _shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self._shapes = _layer_shapes(self.dim, self.hidden)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.param_count,):
            raise DimensionError(
                f"expected {self.param_count} parameters, got {self.params.shape}"
            )

    @property
    def dim(self) -> int:
        return self.oracle.gmm.dim

    @property
    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in _layer_shapes(self.dim, self.hidden)))

    def layers(self, params=None) -> List[np.ndarray]:
        """Views into the flat parameter vector: W1, b1, W2, b2, W3, b3."""
        p = self.params if params is None else params
        out, offset = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(p[offset:offset + size].reshape(shape))
            offset += size
        return out

    def with_params(self, params) -> "ResidualEpsModel":
        return ResidualEpsModel(self.oracle, np.array(params, dtype=float), self.hidden)

    def clone(self) -> "ResidualEpsModel":
        return self.with_params(self.params.copy())

    def features(self, x, t):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        if xb.shape[1] != self.dim:
            raise DimensionError(f"input dimension {xb.shape[1]} != model dimension {self.dim}")
        tb = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
        alpha, sigma = self.oracle.alpha_sigma(tb)
        return np.column_stack([xb, tb, alpha, sigma])

    def residual(self, x, t, return_cache=False):
        feats = self.features(x, t)
        w1, b1, w2, b2, w3, b3 = self.layers()
        h1 = np.tanh(feats @ w1 + b1)
        h2 = np.tanh(h1 @ w2 + b2)
        out = h2 @ w3 + b3
        if return_cache:
            return out, (feats, h1, h2)
        return out

    def residual_vjp(self, x, t, upstream) -> np.ndarray:
        """Parameter gradient of ``sum(upstream * residual(x, t))``."""
        _, (feats, h1, h2) = self.residual(x, t, return_cache=True)
        w1, b1, w2, b2, w3, b3 = self.layers()
        g = np.atleast_2d(upstream)
        d_w3 = h2.T @ g
        d_b3 = g.sum(axis=0)
        dz2 = (g @ w3.T) * (1.0 - h2**2)
        d_w2 = h1.T @ dz2
        d_b2 = dz2.sum(axis=0)
        dz1 = (dz2 @ w2.T) * (1.0 - h1**2)
        d_w1 = feats.T @ dz1
        d_b1 = dz1.sum(axis=0)
        return np.concatenate([a.ravel() for a in (d_w1, d_b1, d_w2, d_b2, d_w3, d_b3)])

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(_MAGIC, self.dim, self.dim + 3, *self.hidden)
        return header + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, oracle: Oracle) -> "ResidualEpsModel":
        magic, dim, n_in, h1, h2 = _HEADER.unpack_from(data)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if dim != oracle.gmm.dim or n_in != dim + 3:
            raise DimensionError(f"checkpoint dim {dim} does not match oracle dim {oracle.gmm.dim}")
        params = np.frombuffer(data[_HEADER.size:], dtype="<f8").astype(float)
        return cls(oracle, params, (h1, h2))


def init_residual_zero(oracle: Oracle, seed, hidden: Sequence[int] = HIDDEN) -> ResidualEpsModel:
    """Fresh predictor: hidden layers U(+-1/sqrt(fan_in)), output layer zero."""
    rng = np.random.default_rng(seed)
    dim = oracle.gmm.dim
    if not 1 <= dim <= 8:
        raise DimensionError(f"model dimension must be in [1, 8], got {dim}")
    chunks = []
    for shape in _layer_shapes(dim, tuple(hidden))[:4]:
        fan_in = shape[0] if len(shape) == 2 else chunks[-1].shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=shape))
    flat = [c.ravel() for c in chunks]
    h2 = hidden[1]
    flat.append(np.zeros(h2 * dim))
    flat.append(np.zeros(dim))
    return ResidualEpsModel(oracle, np.concatenate(flat), tuple(hidden))


def eps_phi(model: ResidualEpsModel, x, t, eps_unc=None) -> np.ndarray:
    """Fake-branch prediction. ``eps_unc`` may be passed to skip the oracle call."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    if xb.shape[1] != model.dim:
        raise DimensionError(f"input dimension {xb.shape[1]} != model dimension {model.dim}")
    base = model.oracle.eps_unc(t, xb) if eps_unc is None else eps_unc
    out = base + model.residual(xb, t)
    return out[0] if np.ndim(x) == 1 else out


LOSS_KINDS = ("textonly", "full", "quadratic")


@dataclass(eq=False)
class LossGraph:
    """A scalar loss that is quadratic in fake-branch outputs.

    ``value`` is the loss; each term is ``(xt, t, dL/d eps_phi(xt, t))``.
    Oracle predictions and added noise enter only through these upstream
    gradients, so they are constants for backprop.
    """

    kind: str
    value: float
    terms: list


def backprop_loss(model: ResidualEpsModel, graph: LossGraph) -> np.ndarray:
    """Exact reverse-mode gradient of ``graph.value`` w.r.t. residual parameters."""
    if not isinstance(graph, LossGraph) or graph.kind not in LOSS_KINDS:
        raise ContractError(f"unknown loss spec {getattr(graph, 'kind', graph)!r}")
    grad = np.zeros(model.param_count)
    for xt, t, upstream in graph.terms:
        grad += model.residual_vjp(xt, t, upstream)
    return grad


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, beta1=0.9, beta2=0.99, eps_hat=1e-8):
        return cls(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps_hat)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"params {params.shape}, grads {grads.shape}, state {state.m.shape} disagree"
        )
    bad = ~np.isfinite(grads)
    if np.any(bad):
        idx = np.flatnonzero(bad.ravel())
        raise NumericError(
            f"non-finite gradient at {idx.size} entries (first index {idx[0]})",
            {"step": state.step, "bad_indices": idx[:16].tolist()},
        )
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return new_params, replace(state, step=step, m=m, v=v)


@dataclass(frozen=True)
class GradReport:
    max_rel_err: float
    worst_index: int
    passed: bool
    n_checked: int = 0


def finite_diff_verify(
    loss_fn: Callable,
    model: ResidualEpsModel,
    h: float = 1e-4,
    tol: float = 1e-4,
    max_params: int = 256,
    seed=0,
) -> GradReport:
    """Compare analytic parameter gradients with central differences.

    ``loss_fn(model)`` returns either a :class:`LossGraph` (differentiated by
    :func:`backprop_loss`) or a ``(value, grad)`` pair. Errors are relative,
    ``|a - n| / (max(|a|, |n|) + 1e-8 * max(1, |L|))``, so entries that are
    zero up to roundoff do not dominate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = loss_fn(model)
    if isinstance(base, LossGraph):
        value, analytic = base.value, backprop_loss(model, base)
    else:
        value, analytic = base[0], np.asarray(base[1], dtype=float)

    def value_at(params):
        out = loss_fn(model.with_params(params))
        return out.value if isinstance(out, LossGraph) else out[0]

    n = model.param_count
    if n > max_params:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_params, replace=False))
    else:
        idx = np.arange(n)
    atol = 1e-8 * max(1.0, abs(value))
    worst, worst_i = 0.0, int(idx[0])
    for i in idx:
        p = model.params.copy()
        p[i] += h
        up = value_at(p)
        p[i] -= 2 * h
        down = value_at(p)
        numeric = (up - down) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / (max(abs(a), abs(numeric)) + atol)
        if not np.isfinite(err):
            err = np.inf
        if err > worst:
            worst, worst_i = float(err), int(i)
    return GradReport(worst, worst_i, worst <= tol, len(idx))
