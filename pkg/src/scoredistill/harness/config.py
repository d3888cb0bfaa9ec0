"""Experiment configs: TOML loading, validation, hashing and reference presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from ..distill import EDIT_SOURCE_ETA, EDIT_SOURCE_GAMMA, DistillConfig
from ..errors import ConditionError, ConfigError
from ..oracle import Condition, GaussianMixture, NoiseSchedule

GENERATION_METHODS = ("sds", "csd", "vsd", "asd")
EDITING_METHODS = ("asd_edit", "dds")

TRAIN_DEFAULTS = {
    "steps": 2000,
    "batch": 8,
    "log_every": 50,
    "lr_gen": 1e-2,
    "lr_disc": 1e-3,
    "seed": 0,
    "out_dir": "",
    "svg_every": 0,
    "disc_loss": "textonly",
}

GENERATOR_DEFAULTS = {
    "particles": {"n": 16, "init": "gauss", "mean": 0.0, "std": 1.0},
    "warped": {"latent_dim": 4, "hidden": 8, "num_views": 4, "view_seed": 0},
}


def _build_condition(spec, gmm: GaussianMixture) -> Condition:
    kind = spec.get("kind", "subset")
    try:
        if kind == "unconditional":
            return Condition.unconditional()
        if kind == "subset":
            return Condition.subset(gmm, spec["components"])
        if kind == "weighted":
            cond = Condition.weighted(spec["weights"])
            cond.mixture_weights(gmm)
            return cond
    except (KeyError, ConditionError) as exc:
        raise ConfigError(f"bad condition {spec}: {exc}") from exc
    raise ConfigError(f"unknown condition kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    mixture: GaussianMixture
    condition_y: dict
    distill: DistillConfig
    generator: dict
    train: dict
    condition_z: Optional[dict] = None
    schedule: dict = field(default_factory=lambda: {"kind": "vp_cosine"})
    edit: dict = field(
        default_factory=lambda: {"source_eta": EDIT_SOURCE_ETA, "source_gamma": EDIT_SOURCE_GAMMA}
    )

    def __post_init__(self):
        train = {**TRAIN_DEFAULTS, **self.train}
        unknown = set(train) - set(TRAIN_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        for key in ("steps", "batch", "log_every", "svg_every", "seed"):
            if int(train[key]) != train[key]:
                raise ConfigError(f"train.{key} must be an integer")
            train[key] = int(train[key])
        if train["steps"] < 1 or train["batch"] < 1 or train["log_every"] < 1:
            raise ConfigError("steps, batch and log_every must be >= 1")
        if train["svg_every"] < 0 or train["seed"] < 0:
            raise ConfigError("svg_every and seed must be non-negative")
        if train["disc_loss"] not in ("textonly", "full"):
            raise ConfigError(f"train.disc_loss must be 'textonly' or 'full', got {train['disc_loss']!r}")
        object.__setattr__(self, "train", train)

        kind = self.generator.get("kind", "particles")
        if kind not in GENERATOR_DEFAULTS:
            raise ConfigError(f"unknown generator kind {kind!r}")
        gen = {"kind": kind, **GENERATOR_DEFAULTS[kind], **self.generator}
        if kind == "particles" and train["batch"] > gen["n"] and gen["init"] != "from_file":
            raise ConfigError(f"batch {train['batch']} exceeds particle count {gen['n']}")
        object.__setattr__(self, "generator", gen)

        try:
            NoiseSchedule(self.schedule.get("kind", "vp_cosine"), self.distill.t_min, self.distill.t_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.cond_y  # validates
        method = self.distill.method
        if method in EDITING_METHODS:
            if self.condition_z is None:
                raise ConfigError(f"method {method} requires [condition_z]")
            self.cond_z
            if kind != "particles" or gen["init"] not in ("at_condition_mode", "from_file"):
                raise ConfigError(
                    f"method {method} needs a source snapshot: particle generator with "
                    "init = 'at_condition_mode' (condition = 'z') or 'from_file'"
                )

    @property
    def cond_y(self) -> Condition:
        return _build_condition(self.condition_y, self.mixture)

    @property
    def cond_z(self) -> Optional[Condition]:
        if self.condition_z is None:
            return None
        return _build_condition(self.condition_z, self.mixture)

    @property
    def sched(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule.get("kind", "vp_cosine"), self.distill.t_min, self.distill.t_max)

    @property
    def seed(self) -> int:
        return self.train["seed"]

    @property
    def out_dir(self) -> Optional[Path]:
        out = self.train["out_dir"]
        return Path(out) if out else None

    def to_mapping(self) -> dict:
        out = {
            "mixture": self.mixture.to_dict(),
            "condition_y": dict(self.condition_y),
            "schedule": dict(self.schedule),
            "distill": self.distill.to_mapping(),
            "generator": dict(self.generator),
            "train": dict(self.train),
        }
        if self.condition_z is not None:
            out["condition_z"] = dict(self.condition_z)
        if self.distill.method in EDITING_METHODS:
            out["edit"] = dict(self.edit)
        return out

    def config_hash(self) -> str:
        mapping = self.to_mapping()
        mapping["train"] = {k: v for k, v in mapping["train"].items() if k != "out_dir"}
        blob = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_train(self, **changes) -> "ExperimentConfig":
        return replace(self, train={**self.train, **changes})

    def with_distill(self, **changes) -> "ExperimentConfig":
        return replace(self, distill=self.distill.with_(**changes))

    def with_generator(self, **changes) -> "ExperimentConfig":
        return replace(self, generator={**self.generator, **changes})


def config_from_mapping(data: dict) -> ExperimentConfig:
    known = {"mixture", "condition_y", "condition_z", "schedule", "distill", "generator", "train", "edit"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for required in ("mixture", "condition_y"):
        if required not in data:
            raise ConfigError(f"config is missing [{required}]")
    try:
        mixture = GaussianMixture(**data["mixture"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [mixture]: {exc}") from exc
    kwargs = {}
    if "edit" in data:
        kwargs["edit"] = {"source_eta": EDIT_SOURCE_ETA, "source_gamma": EDIT_SOURCE_GAMMA, **data["edit"]}
    return ExperimentConfig(
        mixture=mixture,
        condition_y=dict(data["condition_y"]),
        condition_z=dict(data["condition_z"]) if "condition_z" in data else None,
        schedule=dict(data.get("schedule", {"kind": "vp_cosine"})),
        distill=DistillConfig.from_mapping(data.get("distill", {})),
        generator=dict(data.get("generator", {})),
        train=dict(data.get("train", {})),
        **kwargs,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_mapping(data)


def dump_config(config: ExperimentConfig, path=None) -> str:
    text = tomli_w.dumps(config.to_mapping())
    if path is not None:
        Path(path).write_text(text)
    return text


def reference_mixture() -> GaussianMixture:
    """Two unit-variance components at (+3, 0) and (-3, 0), equal weights."""
    return GaussianMixture([0.5, 0.5], [[3.0, 0.0], [-3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])


def reference_config(method: str = "asd", **distill_overrides) -> ExperimentConfig:
    """The 2D reference task: condition on the +x component, start from N(0, I)."""
    distill = DistillConfig(method=method).with_(**distill_overrides)
    return ExperimentConfig(
        mixture=reference_mixture(),
        condition_y={"kind": "subset", "components": [0]},
        distill=distill,
        generator={"kind": "particles", "n": 16, "init": "gauss", "mean": 0.0, "std": 1.0},
        train=dict(TRAIN_DEFAULTS),
    )


def reference_edit_config(method: str = "asd_edit", **distill_overrides) -> ExperimentConfig:
    """Move particles from the -x component (source z) to the +x component (target y)."""
    if method == "dds":
        distill_overrides.setdefault("disc_steps_per_gen_step", 0)
    distill = DistillConfig(method=method).with_(**distill_overrides)
    return ExperimentConfig(
        mixture=reference_mixture(),
        condition_y={"kind": "subset", "components": [0]},
        condition_z={"kind": "subset", "components": [1]},
        distill=distill,
        generator={"kind": "particles", "n": 16, "init": "at_condition_mode", "condition": "z"},
        train=dict(TRAIN_DEFAULTS),
    )
