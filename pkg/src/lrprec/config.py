"""Run configuration: one JSON file, validated into dataclasses."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import RELATION_TYPES
from .errors import ConfigError
from .metric import LOSSES
from .network import LayerSpec, layer_shapes
from .lrp import RELEVANCE_SOURCES


def default_architecture(input_shape, K: int) -> list:
    c, h, w = input_shape
    return [
        LayerSpec.conv(c, 8, 3, 1, 1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.conv(8, 16, 3, 1, 1), LayerSpec.relu(), LayerSpec.maxpool(2),
        LayerSpec.flatten(), LayerSpec.dense(16 * (h // 4) * (w // 4), K),
    ]


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SyntheticConfig:
    n_items: int = 500
    n_users: int = 3
    image_size: int = 16
    pool_size: int = 150
    noise: float = 0.0
    background: float = 0.1


@dataclass
class PerturbationConfig:
    relation_type: str = "also_viewed"
    steps: int = 16
    pixels_per_step: int = 8
    max_pairs: int = 40
    trials: int = 1
    ordering: str = "global"
    threshold: float = 0.5


@dataclass
class PathsConfig:
    data_dir: str = "data"
    manifest: str = "manifest.jsonl"  # relative to data_dir
    checkpoint_dir: str = "checkpoints"  # relative to out_dir
    out_dir: str = "run"


@dataclass
class RunConfig:
    input_shape: tuple = (3, 16, 16)
    architecture: list | None = None
    K: int = 16
    D: list = field(default_factory=lambda: [10])
    loss: str = "log_likelihood"
    relevance_source: str = "probability"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 8
    batch_size: int = 256
    seed: int = 0
    seeds: dict = field(default_factory=dict)
    epsilons: list = field(default_factory=lambda: [0.0, 0.01, 0.1])
    split_fraction: float = 0.8
    k: int = 3
    relation_types: list = field(default_factory=lambda: list(RELATION_TYPES))
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    SEED_OFFSETS = {"generate": 0, "init": 1, "split": 2, "negatives": 3, "shuffle": 4,
                    "eval": 5, "perturbation": 6}

    def seed_for(self, purpose: str) -> int:
        if purpose in self.seeds:
            return int(self.seeds[purpose])
        return self.seed + 1000 * self.SEED_OFFSETS[purpose]

    def specs(self) -> list:
        if self.architecture is None:
            return default_architecture(self.input_shape, self.K)
        return [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in self.architecture]

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self._resolve(self.paths.out_dir)

    @property
    def data_dir(self) -> Path:
        return self._resolve(self.paths.data_dir)

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / self.paths.manifest

    @property
    def checkpoint_dir(self) -> Path:
        p = Path(self.paths.checkpoint_dir)
        return p if p.is_absolute() else self.out_dir / p

    def checkpoint_path(self, relation_type: str, D: int) -> Path:
        return self.checkpoint_dir / f"{relation_type}__D{D}.ckpt"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["input_shape"] = list(self.input_shape)
        d["architecture"] = [s.to_dict() for s in self.specs()]
        return d

    def validate(self) -> "RunConfig":
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"config.{path}: {msg}")

        need(len(self.input_shape) == 3 and all(int(s) >= 1 for s in self.input_shape),
             "input_shape", "must be three positive integers [C, H, W]")
        need(isinstance(self.K, int) and self.K >= 1, "K", "must be an integer >= 1")
        need(isinstance(self.D, list) and self.D and all(isinstance(x, int) and x >= 1 for x in self.D),
             "D", "must be a non-empty list of integers >= 1")
        need(self.loss in LOSSES, "loss", f"must be one of {list(LOSSES)}")
        need(self.relevance_source in RELEVANCE_SOURCES, "relevance_source",
             f"must be one of {list(RELEVANCE_SOURCES)}")
        need(self.optimizer.lr > 0, "optimizer.lr", "must be > 0")
        need(0 <= self.optimizer.beta1 < 1, "optimizer.beta1", "must lie in [0, 1)")
        need(0 <= self.optimizer.beta2 < 1, "optimizer.beta2", "must lie in [0, 1)")
        need(self.optimizer.eps > 0, "optimizer.eps", "must be > 0")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(all(e >= 0 for e in self.epsilons) and self.epsilons, "epsilons",
             "must be a non-empty list of values >= 0")
        need(0 < self.split_fraction < 1, "split_fraction", "must lie in (0, 1)")
        need(self.k >= 1, "k", "must be >= 1")
        for n, t in enumerate(self.relation_types):
            need(t in RELATION_TYPES, f"relation_types[{n}]", f"must be one of {list(RELATION_TYPES)}")
        for key in self.seeds:
            need(key in self.SEED_OFFSETS, f"seeds.{key}", f"unknown seed; expected {sorted(self.SEED_OFFSETS)}")
        need(0 <= self.synthetic.noise < 1, "synthetic.noise", "must lie in [0, 1)")
        need(self.synthetic.n_items >= 2, "synthetic.n_items", "must be >= 2")
        need(self.perturbation.relation_type in RELATION_TYPES, "perturbation.relation_type",
             f"must be one of {list(RELATION_TYPES)}")
        need(self.perturbation.steps >= 0, "perturbation.steps", "must be >= 0")
        need(self.perturbation.pixels_per_step >= 1, "perturbation.pixels_per_step", "must be >= 1")
        need(self.perturbation.max_pairs >= 1, "perturbation.max_pairs", "must be >= 1")
        need(self.perturbation.trials >= 1, "perturbation.trials", "must be >= 1")
        try:
            shapes = layer_shapes(self.specs(), self.input_shape)
        except ConfigError as exc:
            raise ConfigError(f"config.architecture: {exc}") from None
        need(shapes[-1][0] == self.K, "architecture", f"final dense width {shapes[-1][0]} != K={self.K}")
        return self


_NESTED = {"optimizer": OptimizerConfig, "synthetic": SyntheticConfig,
           "perturbation": PerturbationConfig, "paths": PathsConfig}


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"config.{key}: unknown field")
        if key in _NESTED:
            cls = _NESTED[key]
            sub_known = {f.name for f in fields(cls)}
            if not isinstance(value, dict):
                raise ConfigError(f"config.{key}: must be an object")
            for sub in value:
                if sub not in sub_known:
                    raise ConfigError(f"config.{key}.{sub}: unknown field")
            value = cls(**value)
        elif key == "D" and isinstance(value, int):
            value = [value]
        elif key == "input_shape":
            value = tuple(value)
        elif key == "architecture" and value is not None:
            try:
                value = [LayerSpec.from_dict(s) for s in value]
            except ConfigError as exc:
                raise ConfigError(f"config.architecture: {exc}") from None
        kwargs[key] = value
    cfg = RunConfig(**kwargs, base_dir=Path(base_dir))
    return cfg.validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(raw, base_dir=path.parent)
