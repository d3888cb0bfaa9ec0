"""Training loops for generation and editing, and parameter sweeps.

Each generator step follows the same order: sample a view and a row batch,
render, noise, compute the method's direction, pull it back and take an
Adam step on theta; then update the fake branch(es).
"""

from __future__ import annotations

import csv
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .. import __version__
from ..distill import (
    asd_gen_direction,
    csd_direction,
    dds_direction,
    disc_loss_full,
    disc_loss_textonly,
    edit_direction,
    gamma_floor,
    sds_direction,
)
from ..errors import ConfigError, NumericError, ScoreDistillError
from ..gen import (
    ParticleGenerator,
    init_particles,
    make_warped,
    pullback,
    render,
    write_particles_csv,
)
from ..oracle import Oracle, noisify, sample_conditional
from ..phi_model import AdamState, adam_step, backprop_loss, init_residual_zero
from .config import EDITING_METHODS, GENERATION_METHODS, ExperimentConfig, dump_config
from .io import emit_svg, write_jsonl, write_run_json
from .metrics import MetricsRow, compute_metrics

logger = logging.getLogger(__name__)

SWEEP_AXES = ("lambda", "gamma", "disc_steps", "seed")


@dataclass(eq=False)
class RunRecord:
    config_hash: str
    version: str
    metrics: List[MetricsRow]
    snapshot_path: Optional[str]
    wall_time: float
    final_particles: np.ndarray
    warnings: List[str] = field(default_factory=list)
    oracle_evals: int = 0
    trajectory: Optional[List[np.ndarray]] = None

    @property
    def final(self) -> MetricsRow:
        return self.metrics[-1]

    def header(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "snapshot_path": self.snapshot_path,
            "wall_time": self.wall_time,
            "n_metrics_rows": len(self.metrics),
            "oracle_evals": self.oracle_evals,
            "warnings": self.warnings,
        }


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


class _Streams:
    """Independent RNG streams so changing one consumer never shifts another."""

    def __init__(self, seed):
        children = np.random.SeedSequence(seed).spawn(6)
        self.init, self.rows, self.noise, self.disc, self.phi, self.real = (
            np.random.default_rng(c) for c in children
        )


def _build_generator(config: ExperimentConfig, streams: _Streams, init_points=None):
    spec = config.generator
    gmm = config.mixture
    if init_points is not None:
        return ParticleGenerator(np.array(init_points, dtype=float))
    if spec["kind"] == "warped":
        return make_warped(
            gmm.dim, spec["latent_dim"], spec["hidden"], spec["num_views"], seed=spec["view_seed"]
        )
    cond = config.cond_z if spec.get("condition", "y") == "z" else config.cond_y
    spec = {**spec, "dim": gmm.dim}
    return init_particles(spec, streams.init, gmm=gmm, cond=cond)


def _sample_rows(gen, streams, batch):
    if isinstance(gen, ParticleGenerator):
        view = 0
        rows = np.sort(streams.rows.choice(gen.n, size=batch, replace=False))
    else:
        view = int(streams.rows.integers(gen.num_views))
        rows = np.arange(batch)
    return view, rows


def _noise(rng, cfg, batch, dim):
    t = rng.uniform(cfg.t_min, cfg.t_max, size=batch)
    eps = rng.standard_normal((batch, dim))
    return t, eps


def _check_finite(dirs, step, method):
    if not np.all(np.isfinite(dirs)):
        bad = np.argwhere(~np.isfinite(dirs))
        raise NumericError(
            f"non-finite {method} direction at step {step}",
            {"step": step, "method": method, "bad_entries": bad[:8].tolist()},
        )


def _phi_update(phi, state, graph):
    grad = backprop_loss(phi, graph)
    phi.params, state = adam_step(state, phi.params, grad)
    return state


class _Logger:
    """Collects metrics rows and optional SVG snapshots."""

    def __init__(self, config: ExperimentConfig, cond, out_dir):
        self.config = config
        self.cond = cond
        self.out_dir = out_dir
        self.rows: List[MetricsRow] = []
        self.prev = None

    def maybe_log(self, step, gen):
        every = self.config.train["log_every"]
        if step % every == 0:
            snap = gen.snapshot()
            row = compute_metrics(
                snap, self.config.mixture, self.cond, every, self.prev, step, self.config.sched
            )
            self.rows.append(row)
            self.prev = snap
        svg_every = self.config.train["svg_every"]
        if self.out_dir is not None and svg_every and step % svg_every == 0 and self.config.mixture.dim >= 2:
            emit_svg(gen.snapshot(), self.config.mixture, self.cond, self.out_dir / f"snapshot_{step}.svg")


def _finish(config, gen, log, started, oracle, warnings, trajectory, extra_files=None):
    out_dir = config.out_dir
    final = gen.snapshot()
    snapshot_path = None
    record = RunRecord(
        config_hash=config.config_hash(),
        version=version_string(),
        metrics=log.rows,
        snapshot_path=None,
        wall_time=time.perf_counter() - started,
        final_particles=final,
        warnings=warnings,
        oracle_evals=oracle.evals,
        trajectory=trajectory,
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(record, out_dir / "metrics.jsonl")
        snapshot_path = write_particles_csv(final, out_dir / "particles_final.csv")
        record.snapshot_path = str(snapshot_path)
        for name, points in (extra_files or {}).items():
            write_particles_csv(points, out_dir / name)
        dump_config(config, out_dir / "config.toml")
        write_run_json({**record.header(), "config": config.to_mapping()}, out_dir / "run.json")
    return record


def run_generation(config: ExperimentConfig, init_points=None, record_trajectory: bool = False) -> RunRecord:
    """Distill the conditional target into a generator with sds, csd, vsd or asd."""
    cfg = config.distill
    method = cfg.method
    if method not in GENERATION_METHODS:
        raise ConfigError(f"run_generation handles {GENERATION_METHODS}, got {method!r}")
    started = time.perf_counter()
    train = config.train
    gmm, sched = config.mixture, config.sched
    cond_y = config.cond_y
    oracle = Oracle(gmm, sched)
    streams = _Streams(config.seed)
    gen = _build_generator(config, streams, init_points)
    if isinstance(gen, ParticleGenerator) and train["batch"] > gen.n:
        raise ConfigError(f"batch {train['batch']} exceeds particle count {gen.n}")
    batch_size, dim = train["batch"], gmm.dim

    uses_phi = method in ("vsd", "asd")
    phi = init_residual_zero(oracle, streams.phi) if uses_phi else None
    phi_state = AdamState.zeros(phi.param_count, lr=train["lr_disc"]) if uses_phi else None
    gen_state = AdamState.zeros(gen.theta.size, lr=train["lr_gen"])
    full_loss = train["disc_loss"] == "full"
    warnings: List[str] = []
    trajectory = [gen.theta.copy()] if record_trajectory else None

    out_dir = config.out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _Logger(config, cond_y, out_dir)
    log.maybe_log(0, gen)

    for step in range(1, train["steps"] + 1):
        view, rows = _sample_rows(gen, streams, batch_size)
        x0 = render(gen, view, rows)
        t, eps = _noise(streams.noise, cfg, batch_size, dim)
        batch_g = noisify(sched, x0, t, eps)

        if method == "sds":
            direction = sds_direction(batch_g, cond_y, cfg, oracle)
        elif method == "csd":
            direction = csd_direction(batch_g, cond_y, cfg, oracle)
        else:
            direction = asd_gen_direction(batch_g, cond_y, cfg, oracle, phi)
        _check_finite(direction.dirs, step, method)

        grad = pullback(gen, view, rows, direction.dirs) / batch_size
        new_theta, gen_state = adam_step(gen_state, gen.theta.ravel(), grad.ravel())
        gen.theta = new_theta

        if uses_phi:
            for k in range(cfg.disc_steps_per_gen_step):
                if cfg.share_noise and k == 0:
                    batch_d = batch_g
                else:
                    t_d, eps_d = _noise(streams.disc, cfg, batch_size, dim)
                    batch_d = noisify(sched, render(gen, view, rows), t_d, eps_d)
                if full_loss:
                    real = sample_conditional(gmm, cond_y, batch_size, streams.real)
                    batch_r = noisify(sched, real, batch_d.t, batch_d.eps)
                    floor = gamma_floor(batch_d, batch_r, cond_y, oracle, phi, cfg.eta)
                    if cfg.gamma < floor:
                        warnings.append(f"step {step}: gamma {cfg.gamma} below floor {floor:.6g}")
                    graph = disc_loss_full(batch_d, batch_r, cond_y, cfg, oracle, phi)
                else:
                    graph = disc_loss_textonly(batch_d, cond_y, cfg, oracle, phi)
                phi_state = _phi_update(phi, phi_state, graph)

        if record_trajectory:
            trajectory.append(gen.theta.copy())
        log.maybe_log(step, gen)

    return _finish(config, gen, log, started, oracle, warnings, trajectory)


def run_editing(config: ExperimentConfig, source_points=None) -> RunRecord:
    """Edit a source particle cloud from condition z toward condition y."""
    cfg = config.distill
    method = cfg.method
    if method not in EDITING_METHODS:
        raise ConfigError(f"run_editing handles {EDITING_METHODS}, got {method!r}")
    started = time.perf_counter()
    train = config.train
    gmm, sched = config.mixture, config.sched
    cond_y, cond_z = config.cond_y, config.cond_z
    if cond_z is None:
        raise ConfigError("editing requires condition_z")
    oracle = Oracle(gmm, sched)
    streams = _Streams(config.seed)
    if source_points is None:
        gen = _build_generator(config, streams)
    else:
        gen = ParticleGenerator(np.array(source_points, dtype=float))
    if not isinstance(gen, ParticleGenerator):
        raise ConfigError("editing needs a particle generator")
    source = gen.snapshot()
    source.setflags(write=False)
    batch_size, dim = train["batch"], gmm.dim
    if batch_size > gen.n:
        raise ConfigError(f"batch {batch_size} exceeds particle count {gen.n}")

    learn = method == "asd_edit"
    if learn:
        phi_y = init_residual_zero(oracle, streams.phi)
        phi_z = phi_y.clone()
        state_y = AdamState.zeros(phi_y.param_count, lr=train["lr_disc"])
        state_z = AdamState.zeros(phi_z.param_count, lr=train["lr_disc"])
        cfg_z = cfg.with_(eta=config.edit["source_eta"], gamma=config.edit["source_gamma"], share_noise=False)
    gen_state = AdamState.zeros(gen.theta.size, lr=train["lr_gen"])

    out_dir = config.out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = _Logger(config, cond_y, out_dir)
    log.maybe_log(0, gen)

    for step in range(1, train["steps"] + 1):
        _, rows = _sample_rows(gen, streams, batch_size)
        t, eps = _noise(streams.noise, cfg, batch_size, dim)
        batch_g = noisify(sched, render(gen, 0, rows), t, eps)
        if learn:
            direction = edit_direction(batch_g, cond_y, cond_z, cfg, oracle, phi_y, phi_z)
        else:
            batch_src = noisify(sched, source[rows], t, eps)
            direction = dds_direction(batch_g, batch_src, cond_y, cond_z, cfg, oracle)
        _check_finite(direction.dirs, step, method)

        grad = pullback(gen, 0, rows, direction.dirs) / batch_size
        new_theta, gen_state = adam_step(gen_state, gen.theta.ravel(), grad.ravel())
        gen.theta = new_theta

        if learn:
            for k in range(cfg.disc_steps_per_gen_step):
                if cfg.share_noise and k == 0:
                    batch_d = batch_g
                else:
                    t_d, eps_d = _noise(streams.disc, cfg, batch_size, dim)
                    batch_d = noisify(sched, render(gen, 0, rows), t_d, eps_d)
                batch_r = noisify(sched, source[rows], batch_d.t, batch_d.eps)
                state_y = _phi_update(phi_y, state_y, disc_loss_textonly(batch_d, cond_y, cfg, oracle, phi_y))
                state_z = _phi_update(
                    phi_z, state_z, disc_loss_full(batch_d, batch_r, cond_z, cfg_z, oracle, phi_z)
                )
        log.maybe_log(step, gen)

    return _finish(config, gen, log, started, oracle, [], None, {"source.csv": source})


def run_config(config: ExperimentConfig, **kwargs) -> RunRecord:
    if config.distill.method in EDITING_METHODS:
        return run_editing(config, **kwargs)
    return run_generation(config, **kwargs)


class SweepError(ScoreDistillError):
    def __init__(self, axis, value, cause):
        super().__init__(f"sweep {axis}={value}: {cause}")
        self.axis, self.value, self.cause = axis, value, cause


def _child_config(base: ExperimentConfig, axis, value, out_dir):
    if axis == "lambda":
        child = base.with_distill(**{"lambda": float(value)})
    elif axis == "gamma":
        child = base.with_distill(gamma=float(value))
    elif axis == "disc_steps":
        child = base.with_distill(disc_steps_per_gen_step=int(value))
    elif axis == "seed":
        child = base.with_train(seed=int(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    sub = str(out_dir / f"{axis}_{value}") if out_dir is not None else ""
    return child.with_train(out_dir=sub)


def _run_child(args):
    axis, value, config = args
    try:
        return run_config(config)
    except ScoreDistillError as exc:
        raise SweepError(axis, value, exc) from exc


def sweep(base_config: ExperimentConfig, axis: str, values, out_dir=None, jobs: int = 1):
    """Run one child per axis value; returns ``(records, summary_path_or_None)``."""
    out_dir = Path(out_dir) if out_dir else base_config.out_dir
    children = []
    for value in values:
        try:
            children.append((axis, value, _child_config(base_config, axis, value, out_dir)))
        except ScoreDistillError as exc:
            raise SweepError(axis, value, exc) from exc
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_child, children))
    else:
        records = [_run_child(c) for c in children]

    summary_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / "summary.csv"
        write_summary_csv(axis, children, records, summary_path)
    return records, summary_path


def write_summary_csv(axis, children, records, path):
    names = MetricsRow.field_names()
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "value", "seed", "config_hash", *names])
        for (_, value, config), record in zip(children, records):
            final = record.final.as_dict()
            writer.writerow(
                [axis, value, config.seed, record.config_hash]
                + [final[n] if n == "step" else f"{final[n]:.17g}" for n in names]
            )
    return path


def read_summary_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
