"""Experiment configuration: nested dataclasses with a YAML file format.

The on-disk format is YAML with one table per subsystem (data, encoder,
cpa, flow, train, evaluation); ``load_config(save_config(c)) == c``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .synthetic import SyntheticSpec

VARIANTS = ("full", "A", "B", "C", "D", "E")


@dataclass(frozen=True)
class CpaConfig:
    num_centroids: int = 10
    temperature: float = 3.0
    centroid_lr: float = 0.05
    update_period: int = 1  # centroid step every this many optimizer steps
    alignment_weight: float = 1.0  # cross-domain pull in the centroid update
    dump_centroids: bool = False  # record per-epoch centroid snapshots

    def validate(self) -> None:
        if self.num_centroids < 1:
            raise ConfigError("need at least one centroid")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.centroid_lr <= 0:
            raise ConfigError("centroid_lr must be positive")
        if self.update_period < 1:
            raise ConfigError("update_period must be >= 1")
        if self.alignment_weight < 0:
            raise ConfigError("alignment_weight must be non-negative")


@dataclass(frozen=True)
class FlowConfig:
    kind: str = "ncsf"  # maf | naf | node | ncsf
    num_layers: int = 3
    bandwidth: float = 0.1  # pairing-likelihood standard deviation
    likelihood: str = "pairing"  # pairing | base
    hidden: int = 0  # 0 = derive from width
    spline_bins: int = 8
    sigmoid_units: int = 8
    ode_steps: int = 64

    def validate(self) -> None:
        if self.kind not in ("maf", "naf", "node", "ncsf"):
            raise ConfigError(f"unknown flow kind {self.kind!r}")
        if self.num_layers < 1:
            raise ConfigError("flow needs at least one layer")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        if self.likelihood not in ("pairing", "base"):
            raise ConfigError(f"unknown flow likelihood {self.likelihood!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    group_size: int = 16
    weight_shallow: float = 1.0
    weight_deep: float = 1.0
    variant: str = "full"
    seed: int = 0
    negatives_per_positive: int = 1
    pair_fraction: float = 1.0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.group_size < 1:
            raise ConfigError("group size must be >= 1")
        if self.weight_shallow < 0 or self.weight_deep < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.negatives_per_positive < 1:
            raise ConfigError("need at least one negative per positive")
        if not 0.0 <= self.pair_fraction <= 1.0:
            raise ConfigError("pair_fraction must be in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    pool_size: int = 999
    cutoffs: tuple[int, ...] = (10, 20, 30)

    def validate(self) -> None:
        if self.pool_size < 1:
            raise ConfigError("pool size must be positive")
        if not self.cutoffs or any(c < 1 for c in self.cutoffs):
            raise ConfigError("cutoffs must be positive")


@dataclass(frozen=True)
class DataConfig:
    path_x: str | None = None
    path_y: str | None = None
    cache: str | None = None
    synthetic: SyntheticSpec | None = None

    def validate(self) -> None:
        if (self.path_x is None) != (self.path_y is None):
            raise ConfigError("path_x and path_y must be given together")
        if self.synthetic is not None:
            self.synthetic.validate()


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cpa: CpaConfig = field(default_factory=CpaConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "out"

    def validate(self) -> None:
        self.data.validate()
        self.encoder.validate()
        self.cpa.validate()
        self.flow.validate()
        self.train.validate()
        self.evaluation.validate()


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "cpa": CpaConfig,
    "flow": FlowConfig,
    "train": TrainConfig,
    "evaluation": EvalConfig,
}


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def _build(cls, payload: dict):
    if payload is None:
        payload = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if name == "synthetic" and value is not None:
            value = _build(SyntheticSpec, value)
        elif name == "cutoffs" and value is not None:
            value = tuple(int(v) for v in value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(payload: dict) -> ExperimentConfig:
    payload = dict(payload or {})
    unknown = set(payload) - set(_SECTIONS) - {"output_dir"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _build(cls, payload.get(name)) for name, cls in _SECTIONS.items()}
    config = ExperimentConfig(output_dir=payload.get("output_dir", "out"), **kwargs)
    config.validate()
    return config


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(config_to_dict(config), sort_keys=True), encoding="utf-8"
    )


def load_config(path: str | Path) -> ExperimentConfig:
    payload = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(payload)


# ---------------------------------------------------------------------------
# Parameter overrides (grid search, CLI --param)

# short names accepted on the command line
PARAM_ALIASES = {
    "d": "encoder.embed_dim",
    "K": "encoder.num_layers",
    "k": "encoder.shallow_layers",
    "N": "train.group_size",
    "T": "cpa.num_centroids",
    "alpha": "cpa.temperature",
    "flow": "flow.kind",
    "L": "flow.num_layers",
    "lr": "train.learning_rate",
    "epochs": "train.epochs",
    "seed": "train.seed",
    "variant": "train.variant",
}


def coerce_value(raw: str):
    text = raw.strip()
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def resolve_dataset(config: ExperimentConfig):
    """Materialize the configured data source (cache > csv pair > synthetic)."""
    from .data import load_dataset, load_domain_pair
    from .synthetic import generate_synthetic

    data_cfg = config.data
    if data_cfg.cache is not None:
        return load_dataset(data_cfg.cache)
    if data_cfg.path_x is not None:
        return load_domain_pair(data_cfg.path_x, data_cfg.path_y, config.train.seed)
    if data_cfg.synthetic is not None:
        return generate_synthetic(data_cfg.synthetic)
    raise ConfigError("configure a data source: csv paths, a cache file, or a synthetic spec")


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a new config with dotted-path (or aliased) values replaced."""
    payload = config_to_dict(config)
    for key, value in overrides.items():
        path = PARAM_ALIASES.get(key, key)
        parts = path.split(".")
        node = payload
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown config path {path!r}")
            if node[part] is None:
                node[part] = {}  # optional table (e.g. a synthetic spec)
            if not isinstance(node[part], dict):
                raise ConfigError(f"unknown config path {path!r}")
            node = node[part]
        # final-key typos surface as unknown-field errors during rebuild
        node[parts[-1]] = value
    return config_from_dict(payload)
