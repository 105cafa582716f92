"""Run configuration: YAML (or JSON) with model / train / data / eval sections.

Every key has a default and unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import DESK_WIDTHS
from .errors import ConfigError
from .scenegen import PRIMITIVES, SceneSpec


@dataclass
class ModelSection:
    widths: list = field(default_factory=lambda: list(DESK_WIDTHS))
    dim: int = 32
    add_coords: bool = True
    num_queries: int = 20
    heads: int = 8
    ffn_dim: int = 128
    levels_attended: int = 3
    iterations: int = 3
    voxel_sample_limit: int = 1024
    num_classes: int = 4
    query_init: str = "fps-zeros"
    self_attention: bool = True
    dice_weight: float = 2.0
    bce_weight: float = 5.0
    cls_weight: float = 2.0
    no_object_weight: float = 0.1


@dataclass
class TrainSection:
    steps: int = 500
    lr: float = 1.5e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    grad_clip: float | None = 50.0
    warmup_frac: float = 0.1
    final_div: float = 100.0
    seed: int = 0
    augment_flip: bool = False
    augment_rotate: bool = False
    augment_scale: bool = False
    train_query_counts: list | str | None = "auto"
    checkpoint_every: int = 100


@dataclass
class DataSection:
    scene_dir: str | None = None
    voxel_size: float = 0.2
    extent: float = 7.0
    palette: list = field(default_factory=lambda: list(PRIMITIVES))
    instance_count: list = field(default_factory=lambda: [3, 5])
    points_per_instance: list = field(default_factory=lambda: [150, 300])
    floor_density: float = 25.0
    color_noise: float = 0.03
    label_noise: float = 0.0
    min_gap: float = 1.0


@dataclass
class EvalSection:
    eps: float = 0.9
    enable_dbscan: bool = True
    confidence_filter: float = 0.8
    min_class_prob: float = 0.0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scene_spec(self, seed: int = 0) -> SceneSpec:
        d = self.data
        return SceneSpec(seed=seed, extent=d.extent, palette=tuple(d.palette), instance_count=tuple(d.instance_count),
                         points_per_instance=tuple(d.points_per_instance), floor_density=d.floor_density,
                         color_noise=d.color_noise, label_noise=d.label_noise, min_gap=d.min_gap)

    def estimator_params(self) -> dict:
        m, t, d, e = self.model, self.train, self.data, self.eval
        params = dataclasses.asdict(m)
        params["widths"] = tuple(m.widths)
        params.update(steps=t.steps, lr=t.lr, weight_decay=t.weight_decay, batch_size=t.batch_size, grad_clip=t.grad_clip,
                      warmup_frac=t.warmup_frac, final_div=t.final_div, augment_flip=t.augment_flip,
                      augment_rotate=t.augment_rotate, augment_scale=t.augment_scale,
                      train_query_counts=(tuple(t.train_query_counts) if isinstance(t.train_query_counts, list)
                                          else t.train_query_counts),
                      seed=t.seed, voxel_size=d.voxel_size, dbscan_eps=e.eps, enable_dbscan=e.enable_dbscan,
                      confidence_filter=e.confidence_filter, min_class_prob=e.min_class_prob)
        return params


def _fill(cls, values: dict, where: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    defaults = cls()
    for k, v in values.items():
        _check_type(f"{where}.{k}", getattr(defaults, k), v)
    return cls(**values)


def _check_type(name: str, default, value) -> None:
    if value is None or default is None or isinstance(default, str):
        return  # optional fields and string modes are validated where they are used
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    sections = {"model": ModelSection, "train": TrainSection, "data": DataSection, "eval": EvalSection}
    unknown = set(raw) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    cfg = RunConfig(**{k: _fill(cls, raw.get(k), k) for k, cls in sections.items()})
    if len(cfg.data.palette) != cfg.model.num_classes:
        raise ConfigError(f"data.palette has {len(cfg.data.palette)} primitives but model.num_classes is "
                          f"{cfg.model.num_classes}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
