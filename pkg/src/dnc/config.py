"""Run configuration: nested dataclasses, JSON round-tripping, digests.

A run is fully described by a :class:`RunConfig`; its canonical-JSON digest
is stamped into every artifact so resumed runs can detect configuration
drift.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .errors import ConfigError
from .model import EncoderConfig, HeadConfig
from .schedule import ScheduleSpec


@dataclass(frozen=True)
class DataConfig:
    """Where the corpus comes from: a synthetic generator or a directory.

    Synthetic kinds share one class-prototype stream per seed, so the probe
    splits depict the same classes as the pretraining corpus while drawing
    independent items.
    """

    kind: str = "uncurated"  # "curated" | "uncurated" | "path"
    num_classes: int = 8
    per_class: int = 32  # curated corpus size per class
    total: int = 256  # uncurated corpus size
    zipf_exponent: float = 1.0
    image_size: tuple = (24, 24)
    channels: int = 3
    class_separation: float = 1.0
    noise_std: float = 0.1
    seed: int = 0
    probe_per_class: int = 24
    probe_test_per_class: int = 16
    path: str | None = None
    probe_train_path: str | None = None
    probe_test_path: str | None = None

    def validate(self) -> None:
        if self.kind not in ("curated", "uncurated", "path"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind == "path":
            if not self.path:
                raise ConfigError("data kind 'path' requires a dataset path")
        else:
            if self.num_classes < 2:
                raise ConfigError("synthetic corpora need at least 2 classes")
            if self.kind == "curated" and self.per_class < 1:
                raise ConfigError("per_class must be positive")
            if self.kind == "uncurated" and self.total < self.num_classes:
                raise ConfigError("total must cover every class")
            if self.probe_per_class < 2 or self.probe_test_per_class < 1:
                raise ConfigError("probe splits too small")
            if self.channels not in (1, 3):
                raise ConfigError("channels must be 1 or 3")


@dataclass(frozen=True)
class ProbeConfig:
    """Linear evaluation protocol on frozen features."""

    lr_grid: tuple = (0.03, 0.1, 0.3, 1.0)
    epochs: int = 60
    batch_size: int = 64
    val_fraction: float = 0.2
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0
    mode: str = "sgd"  # "sgd" | "lbfgs"
    l2_grid_points: int = 45
    l2_grid_range: tuple = (1e-6, 1e5)
    layer: str = "pooled"
    network: str = "online"
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("sgd", "lbfgs"):
            raise ConfigError(f"unknown probe mode {self.mode!r}")
        if not self.lr_grid or any(lr <= 0 for lr in self.lr_grid):
            raise ConfigError("lr_grid must hold positive rates")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe epochs and batch_size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.layer not in ("pooled", "hidden", "projection"):
            raise ConfigError(f"unknown probe layer {self.layer!r}")
        if self.network not in ("online", "momentum"):
            raise ConfigError(f"unknown probe network {self.network!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a divide-and-contrast run needs."""

    seed: int = 0
    output_dir: str = "runs/dnc"
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(stem_channels=8, stage_channels=(8, 16, 32, 64)))
    head: HeadConfig = field(default_factory=lambda: HeadConfig(hidden=128, output=32))
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    view_size: tuple | None = None  # None: native image size
    partitioning: str = "clustered"  # "clustered" | "random"
    expert_data: str = "partition"  # "partition" | "full"
    distill_targets: str = "both"  # "both" | "base_only" | "experts_only"
    teacher_view: str = "augmented"  # "augmented" | "center_crop"
    cluster_layer: str = "hidden"
    cluster_sample: int | None = None
    kmeans_n_init: int = 4
    kmeans_max_iters: int = 100
    workers: int = 1

    def validate(self) -> None:
        self.data.validate()
        self.encoder.validate()
        self.head.validate()
        self.schedule.validate()
        self.probe.validate()
        if self.partitioning not in ("clustered", "random"):
            raise ConfigError(f"unknown partitioning {self.partitioning!r}")
        if self.expert_data not in ("partition", "full"):
            raise ConfigError(f"unknown expert_data {self.expert_data!r}")
        if self.distill_targets not in ("both", "base_only", "experts_only"):
            raise ConfigError(f"unknown distill_targets {self.distill_targets!r}")
        if self.teacher_view not in ("augmented", "center_crop"):
            raise ConfigError(f"unknown teacher_view {self.teacher_view!r}")
        if self.cluster_layer not in ("pooled", "hidden", "projection"):
            raise ConfigError(f"unknown cluster_layer {self.cluster_layer!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.data.kind != "path" and self.encoder.input_channels != self.data.channels:
            raise ConfigError(
                f"encoder expects {self.encoder.input_channels} channels, data has {self.data.channels}"
            )

    def with_updates(self, **kw) -> "RunConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_NESTED = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "head": HeadConfig,
    "schedule": ScheduleSpec,
    "probe": ProbeConfig,
}


def _normalize(value):
    if isinstance(value, tuple):
        return [_normalize(v) for v in value]
    if isinstance(value, list):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        return {k: _normalize(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _normalize(asdict(cfg))


def _build_dataclass(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in payload.items():
        default = known[name].default
        if isinstance(default, tuple) or (
            isinstance(value, list) and isinstance(default, tuple)
        ):
            value = tuple(value) if isinstance(value, list) else value
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a mapping")
    payload = dict(payload)
    kwargs = {}
    for key, cls in _NESTED.items():
        if key in payload:
            kwargs[key] = _build_dataclass(cls, payload.pop(key), key)
    top = _build_dataclass(RunConfig, payload, "run config")
    cfg = replace(top, **kwargs) if kwargs else top
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, sort_keys=True, indent=2)
        fh.write("\n")


# Keys that say where or how to execute, not what to compute. Excluded from
# the digest so the same run in another directory, or with another worker
# count, still produces byte-identical artifacts.
EXECUTION_KEYS = ("output_dir", "workers")


def config_digest(cfg: RunConfig | dict) -> str:
    if is_dataclass(cfg):
        payload = config_to_dict(cfg)
    elif isinstance(cfg, dict):
        payload = _normalize(cfg)
    else:
        raise ConfigError("digest input must be a config or mapping")
    payload = {k: v for k, v in payload.items() if k not in EXECUTION_KEYS}
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
