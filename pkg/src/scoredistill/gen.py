"""Generator parameterizations and their vector-Jacobian products."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .oracle import Condition, GaussianMixture


@dataclass(eq=False)
class ParticleGenerator:
    """theta is the particle array itself; rendering is row selection."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_views(self) -> int:
        return 1

    @property
    def theta(self) -> np.ndarray:
        return self.points

    @theta.setter
    def theta(self, value):
        self.points = np.asarray(value, dtype=float).reshape(self.points.shape)

    def snapshot(self) -> np.ndarray:
        return self.points.copy()


@dataclass(eq=False)
class WarpedLatentGenerator:
    """``render(theta, c) = W_c tanh(U theta + b)``, a toy differentiable renderer."""

    latent: np.ndarray
    views: List[np.ndarray]
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.latent = np.asarray(self.latent, dtype=float).reshape(-1)
        self.U = np.array(self.U, dtype=float)
        self.b = np.array(self.b, dtype=float).reshape(-1)
        self.views = [np.array(w, dtype=float) for w in self.views]
        m, k = self.U.shape
        if k != self.latent.shape[0] or self.b.shape[0] != m:
            raise DimensionError(f"U {self.U.shape}, b {self.b.shape}, latent {self.latent.shape} disagree")
        if not self.views or any(w.shape != (self.views[0].shape[0], m) for w in self.views):
            raise DimensionError("every view matrix must be (d, m)")
        for arr in (self.U, self.b, *self.views):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.views[0].shape[0]

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def theta(self) -> np.ndarray:
        return self.latent

    @theta.setter
    def theta(self, value):
        self.latent = np.asarray(value, dtype=float).reshape(self.latent.shape)

    def snapshot(self) -> np.ndarray:
        """Rendered point for every view, one row per view."""
        return np.stack([render(self, c, [0])[0] for c in range(self.num_views)])


def make_warped(dim: int, latent_dim: int = 4, hidden: int = 8, num_views: int = 4, seed=0) -> WarpedLatentGenerator:
    """Random fixed maps with entries N(0, 1/fan_in); latent drawn N(0, 1)."""
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(hidden, latent_dim))
    b = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=hidden)
    views = [rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(dim, hidden)) for _ in range(num_views)]
    latent = rng.standard_normal(latent_dim)
    return WarpedLatentGenerator(latent, views, U, b)


def _check_rows(gen, rows):
    rows = np.asarray(rows, dtype=int).reshape(-1)
    limit = gen.n if isinstance(gen, ParticleGenerator) else None
    if rows.size == 0 or rows.min() < 0 or (limit is not None and rows.max() >= limit):
        raise IndexError(f"row indices {rows.tolist()} out of range")
    return rows


def render(gen, view_index: int, row_indices) -> np.ndarray:
    rows = _check_rows(gen, row_indices)
    if isinstance(gen, ParticleGenerator):
        return gen.points[rows].copy()
    if not 0 <= view_index < gen.num_views:
        raise IndexError(f"view {view_index} out of range")
    x = gen.views[view_index] @ np.tanh(gen.U @ gen.latent + gen.b)
    return np.tile(x, (rows.size, 1))


def pullback(gen, view_index: int, row_indices, dirs) -> np.ndarray:
    """Vector-Jacobian product of ``dirs`` through ``render``; shaped like theta."""
    rows = _check_rows(gen, row_indices)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape != (rows.size, gen.dim):
        raise DimensionError(f"dirs {dirs.shape} do not match render output {(rows.size, gen.dim)}")
    if isinstance(gen, ParticleGenerator):
        grad = np.zeros_like(gen.points)
        np.add.at(grad, rows, dirs)
        return grad
    if not 0 <= view_index < gen.num_views:
        raise IndexError(f"view {view_index} out of range")
    h = np.tanh(gen.U @ gen.latent + gen.b)
    upstream = gen.views[view_index].T @ dirs.sum(axis=0)
    return gen.U.T @ ((1.0 - h**2) * upstream)


def init_particles(spec: dict, rng_seed, gmm: Optional[GaussianMixture] = None, cond: Optional[Condition] = None):
    """Initial particle cloud.

    ``spec["init"]`` is ``"gauss"`` (keys ``mean``, ``std``),
    ``"at_condition_mode"`` (component means of ``cond`` plus N(0, 0.01 I)
    jitter; needs ``gmm``) or ``"from_file"`` (key ``path``, a particle CSV).
    """
    kind = spec.get("init", "gauss")
    if kind == "from_file":
        points = read_particles_csv(spec["path"])
        if "n" in spec and points.shape[0] != spec["n"]:
            raise ConfigError(f"{spec['path']} has {points.shape[0]} particles, expected {spec['n']}")
        return ParticleGenerator(points)
    n = int(spec["n"])
    if n < 1:
        raise ConfigError("particle count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if kind == "gauss":
        dim = int(spec["dim"])
        mean = np.broadcast_to(np.asarray(spec.get("mean", 0.0), dtype=float), (dim,))
        std = np.broadcast_to(np.asarray(spec.get("std", 1.0), dtype=float), (dim,))
        return ParticleGenerator(mean + std * rng.standard_normal((n, dim)))
    if kind == "at_condition_mode":
        if gmm is None or cond is None:
            raise ConfigError("at_condition_mode needs a mixture and a condition")
        w = cond.mixture_weights(gmm)
        comp = rng.choice(gmm.n_components, size=n, p=w)
        jitter = 0.1 * rng.standard_normal((n, gmm.dim))
        return ParticleGenerator(gmm.means[comp] + jitter)
    raise ConfigError(f"unknown particle init {kind!r}")


def write_particles_csv(points, path) -> Path:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(points.shape[1])])
        for row in points:
            writer.writerow([f"{v:.17g}" for v in row])
    return path


def read_particles_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"particle file {path} not found")
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header != [f"x{i}" for i in range(len(header))] or not body:
            raise ValueError("bad header or no rows")
        points = np.array([[float(v) for v in r] for r in body], dtype=float)
        if points.shape[1] != len(header):
            raise ValueError("ragged rows")
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"corrupt particle file {path}: {exc}") from exc
    return points
