"""Run persistence: JSONL metrics, run headers and SVG particle snapshots."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import contourpy
import numpy as np

from ..errors import DimensionError
from ..oracle import Condition, GaussianMixture, conditional_mixture, log_density
from .metrics import MetricsRow

logger = logging.getLogger(__name__)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if not math.isfinite(value):
        return "null"
    return f"{value:.17g}"


def metrics_line(row: MetricsRow) -> str:
    body = ", ".join(f'"{k}": {_fmt(v)}' for k, v in row.as_dict().items())
    return "{" + body + "}"


def write_jsonl(record, path) -> Path:
    """One JSON object per metrics row; floats carry 17 significant digits."""
    rows = record.metrics if hasattr(record, "metrics") else record
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        for row in rows:
            fh.write(metrics_line(row) + "\n")
    return path


def read_jsonl(path):
    rows = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                data = json.loads(line)
                rows.append(MetricsRow(**{k: (math.nan if v is None else v) for k, v in data.items()}))
    return rows


def write_run_json(header: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def _planar_mixture(gmm: GaussianMixture) -> GaussianMixture:
    # diagonal covariances: the marginal over the first two axes is exact
    return GaussianMixture(gmm.weights, gmm.means[:, :2], gmm.cov_diag[:, :2])


def _num(v) -> str:
    return f"{v:.4f}"


def emit_svg(particles, gmm: GaussianMixture, cond: Condition, path, grid: int = 120) -> Path:
    """Write density contours of the conditional target plus one circle per particle.

    Contour levels sit at the peak density times ``exp(-k^2 / 2)``,
    ``k = 1, 2, 3``. The y axis points up.
    """
    pts = np.atleast_2d(np.asarray(particles, dtype=float))
    if pts.size == 0 or pts.shape[0] == 0:
        raise ValueError("emit_svg needs at least one particle")
    if gmm.dim < 2:
        raise DimensionError("emit_svg needs at least two dimensions")
    if gmm.dim > 2:
        logger.warning("emit_svg: projecting %d-D state onto the first two coordinates", gmm.dim)
        gmm = _planar_mixture(gmm)
    pts = pts[:, :2]

    target = conditional_mixture(gmm, cond)
    spread = 2.0 * np.sqrt(target.cov_diag)
    lo = np.minimum(pts.min(axis=0), (target.means - spread).min(axis=0))
    hi = np.maximum(pts.max(axis=0), (target.means + spread).max(axis=0))
    span = np.maximum(hi - lo, 1e-6)
    lo = lo - 0.1 * span
    hi = hi + 0.1 * span
    width, height = hi - lo

    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    dens = np.exp(log_density(gmm, cond, None, np.column_stack([gx.ravel(), gy.ravel()]))).reshape(gx.shape)
    peak = dens.max()
    gen = contourpy.contour_generator(gx, gy, dens)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{_num(lo[0])} {_num(-hi[1])} '
        f'{_num(width)} {_num(height)}" width="480" height="{_num(480 * height / width)}">',
        f'<rect x="{_num(lo[0])}" y="{_num(-hi[1])}" width="{_num(width)}" height="{_num(height)}" fill="white"/>',
    ]
    stroke = _num(0.004 * max(width, height))
    for k, colour in zip((1, 2, 3), ("#1f4e79", "#4f81bd", "#9dc3e6")):
        level = peak * math.exp(-0.5 * k * k)
        for line in gen.lines(level):
            coords = " ".join(f"{_num(x)},{_num(-y)}" for x, y in line)
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="{stroke}"/>'
            )
    radius = _num(0.008 * max(width, height))
    for x, y in pts:
        parts.append(f'<circle cx="{_num(x)}" cy="{_num(-y)}" r="{radius}" fill="#c0392b" fill-opacity="0.7"/>')
    parts.append("</svg>")

    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
