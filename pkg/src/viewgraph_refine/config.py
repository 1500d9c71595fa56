"""Pipeline configuration: one JSON file, dataclass sections, dotted overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .eig import IrlsConfig
from .epipolar import RansacConfig
from .posernet.train import TrainConfig
from .synth import NOISE_PRESETS, NoiseModel, SceneConfig

WORK_DIR_ENV = "VIEWGRAPH_REFINE_WORK_DIR"
INIT_MODES = ("bb-noise", "kp-noise", "epipolar")
MODE_PRESETS = {"bb-noise": "bb-like", "kp-noise": "kp-like"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    work_dir: str = "work"
    # relative paths below are resolved against work_dir
    checkpoint: str = "checkpoints/posernet.json"
    reports: str = "reports"


@dataclass(frozen=True)
class DatasetConfig:
    train_graphs: int = 200
    val_graphs: int = 50
    test_graphs: int = 100

    def __post_init__(self):
        if min(self.train_graphs, self.val_graphs, self.test_graphs) < 0:
            raise ValueError("graph counts must be non-negative")

    def counts(self) -> dict[str, int]:
        return {"train": self.train_graphs, "val": self.val_graphs, "test": self.test_graphs}


@dataclass(frozen=True)
class InitConfig:
    mode: str = "kp-noise"

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise ValueError(f"init mode must be one of {INIT_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class PipelineConfig:
    rng_seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    # None selects the preset that belongs to init.mode
    noise: NoiseModel | None = None
    init: InitConfig = field(default_factory=InitConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    irls: IrlsConfig = field(default_factory=IrlsConfig)

    def noise_model(self) -> NoiseModel:
        if self.noise is not None:
            return self.noise
        if self.init.mode == "epipolar":
            return NoiseModel()
        return NOISE_PRESETS[MODE_PRESETS[self.init.mode]]


SECTIONS = {
    "paths": PathsConfig,
    "dataset": DatasetConfig,
    "scene": SceneConfig,
    "noise": NoiseModel,
    "init": InitConfig,
    "ransac": RansacConfig,
    "train": TrainConfig,
    "irls": IrlsConfig,
}

# --nodes 125: large single-scene graphs, far fewer of them
LARGE_GRAPH_NODES = 125
LARGE_SCENE = {"num_objects": 400, "room_extent": 1.0, "camera_radius_range": (2.2, 3.2)}
LARGE_DATASET = {"train_graphs": 20, "val_graphs": 5, "test_graphs": 10}


def _build(cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{cls.__name__}]: {exc}") from exc


def from_dict(doc: dict) -> PipelineConfig:
    unknown = set(doc) - set(SECTIONS) - {"rng_seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "rng_seed" in doc and not isinstance(doc["rng_seed"], int):
        raise ConfigError("rng_seed must be an integer")
    kwargs = {"rng_seed": doc.get("rng_seed", 0)}
    for name, cls in SECTIONS.items():
        if name in doc and doc[name] is not None:
            kwargs[name] = _build(cls, doc[name])
    return PipelineConfig(**kwargs)


def to_dict(config: PipelineConfig) -> dict:
    return asdict(config)


def dumps(config: PipelineConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"


def load(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)


def apply_override(doc: dict, assignment: str) -> dict:
    """``section.key=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if len(parts) == 1:
        doc[parts[0]] = value
    elif len(parts) == 2:
        section = doc.get(parts[0])
        if section is None:
            section = {}
        doc[parts[0]] = {**section, parts[1]: value}
    else:
        raise ConfigError(f"override key too deep: {key!r}")
    return doc


def resolve(
    path=None,
    overrides: list[str] = (),
    nodes: int | None = None,
    mode: str | None = None,
    work_dir: str | None = None,
    environ=os.environ,
) -> PipelineConfig:
    """Config file, then --nodes / --mode, then --set overrides, then the work dir.

    The work dir precedence is flag, environment variable, config file.
    """
    doc = to_dict(load(path)) if path is not None else to_dict(PipelineConfig())
    if nodes is not None:
        doc["scene"] = {**doc["scene"], "num_cameras": nodes}
        if nodes >= LARGE_GRAPH_NODES:
            doc["scene"].update(LARGE_SCENE)
            doc["dataset"] = {**doc["dataset"], **LARGE_DATASET}
    if mode is not None:
        doc["init"] = {**doc["init"], "mode": mode}
    for assignment in overrides:
        apply_override(doc, assignment)
    if work_dir is None:
        work_dir = environ.get(WORK_DIR_ENV)
    if work_dir:
        doc["paths"] = {**doc["paths"], "work_dir": work_dir}
    return from_dict(doc)


def with_section(config: PipelineConfig, name: str, **changes) -> PipelineConfig:
    return replace(config, **{name: replace(getattr(config, name), **changes)})
