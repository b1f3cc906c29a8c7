"""Declarative run configuration (YAML or JSON).

Unknown keys are rejected everywhere so typos fail before any work starts.
Sub-seeds left as ``null`` inherit the top-level ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .provider import ProviderSpec
from .trainer import TrainConfig
from .utils import canonical_json, sha256_hex


def _strict(cls, data, section):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{section}] must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


@dataclasses.dataclass
class SplitSection:
    train_fraction: float = 0.8
    seed: int | None = None


@dataclasses.dataclass
class SyntheticSection:
    n_train: int = 64
    n_test: int = 32
    n_decoys: int = 64
    offset_scale: float = 1.5
    tag: str = "[nl]"
    seed: int | None = None


@dataclasses.dataclass
class DatasetSection:
    format: str = "beir"
    path: str | None = None
    name: str | None = None
    train_split: str | None = None
    split: SplitSection | None = None
    synthetic: SyntheticSection | None = None

    def __post_init__(self):
        if self.format not in ("beir", "pairs", "synthetic"):
            raise ConfigurationError(f"[dataset] format must be beir, pairs or synthetic, got {self.format!r}")
        if self.format != "synthetic" and not self.path:
            raise ConfigurationError(f"[dataset] path is required for format {self.format!r}")
        if isinstance(self.split, dict):
            self.split = _strict(SplitSection, self.split, "dataset.split")
        if isinstance(self.synthetic, dict) or (self.format == "synthetic" and self.synthetic is None):
            self.synthetic = _strict(SyntheticSection, self.synthetic, "dataset.synthetic")


@dataclasses.dataclass
class StubSection:
    mode: str = "hashed"
    seed: int | None = None
    tag: str = "[nl]"
    offset_scale: float = 1.5
    distribution: str = "sign"


@dataclasses.dataclass
class ProviderSection:
    kind: str = "stub"
    model_name: str = "text-embedding-ada-002"
    dimension: int = 1536
    endpoint_url: str = "https://api.openai.com/v1/embeddings"
    api_key_env_var: str = "OPENAI_API_KEY"
    batch_size: int = 64
    max_retries: int = 5
    timeout: float = 60.0
    max_chars: int = 8000
    max_concurrency: int = 1
    cache_dir: str | None = None
    stub: StubSection | None = None

    def __post_init__(self):
        if isinstance(self.stub, dict) or self.stub is None:
            self.stub = _strict(StubSection, self.stub, "provider.stub")

    def spec(self):
        fields = {f.name for f in dataclasses.fields(ProviderSpec)}
        return ProviderSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in fields})


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


@dataclasses.dataclass
class TrainSection:
    params: dict
    grid: list | None = None
    hidden_sizes: list | None = None

    @classmethod
    def parse(cls, data):
        data = dict(data or {})
        grid = data.pop("grid", None)
        hidden_sizes = data.pop("hidden_sizes", None)
        unknown = sorted(set(data) - _TRAIN_FIELDS)
        if unknown:
            raise ConfigurationError(f"[train] unknown keys: {', '.join(unknown)}")
        if grid is not None:
            if not isinstance(grid, list) or not grid:
                raise ConfigurationError("[train] grid must be a non-empty list of mappings")
            for i, cell in enumerate(grid):
                if not isinstance(cell, dict):
                    raise ConfigurationError(f"[train.grid[{i}]] must be a mapping")
                bad = sorted(set(cell) - _TRAIN_FIELDS)
                if bad:
                    raise ConfigurationError(f"[train.grid[{i}]] unknown keys: {', '.join(bad)}")
        if grid is not None and hidden_sizes is not None:
            raise ConfigurationError("[train] give either grid or hidden_sizes, not both")
        section = cls(data, grid, hidden_sizes)
        section.config(0)  # validate eagerly
        return section

    def config(self, seed, **overrides):
        params = {"seed": seed, **self.params, **overrides}
        try:
            return TrainConfig(**params)
        except TypeError as exc:
            raise ConfigurationError(f"[train] {exc}") from exc

    def grid_configs(self, seed, d, **overrides):
        base = self.config(seed, **overrides)
        if self.grid is not None:
            return [dataclasses.replace(base, **cell) for cell in self.grid]
        if self.hidden_sizes is not None:
            return [dataclasses.replace(base, h=h) for h in self.hidden_sizes]
        return None


@dataclasses.dataclass
class EvalSection:
    ks: list = dataclasses.field(default_factory=lambda: [1, 3, 5, 10])
    out: str = "runs/default"
    gain: str = "exponential"
    partition: str = "test"

    def __post_init__(self):
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigurationError("[eval] ks must be positive integers")
        self.ks = sorted(int(k) for k in self.ks)
        if self.gain not in ("exponential", "linear"):
            raise ConfigurationError("[eval] gain must be exponential or linear")


@dataclasses.dataclass
class RunConfig:
    dataset: DatasetSection
    provider: ProviderSection
    train: TrainSection
    eval: EvalSection
    seed: int = 0
    base_dir: Path = Path(".")
    raw: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, data, base_dir="."):
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a mapping")
        allowed = {"dataset", "provider", "train", "eval", "seed"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ConfigurationError(f"unknown top-level keys: {', '.join(unknown)}")
        return cls(
            dataset=_strict(DatasetSection, data.get("dataset"), "dataset"),
            provider=_strict(ProviderSection, data.get("provider"), "provider"),
            train=TrainSection.parse(data.get("train")),
            eval=_strict(EvalSection, data.get("eval"), "eval"),
            seed=int(data.get("seed", 0)),
            base_dir=Path(base_dir),
            raw=data,
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text("utf-8")
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self):
        return self.resolve(self.eval.out)

    @property
    def cache_dir(self):
        if self.provider.cache_dir:
            return self.resolve(self.provider.cache_dir)
        return self.out_dir / "embedding_cache"

    def sub_seed(self, value):
        return self.seed if value is None else value

    def effective(self):
        """Config after overrides and seed inheritance, as plain data."""
        return {
            "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "provider": dataclasses.asdict(self.provider),
            "train": {"params": self.train.params, "grid": self.train.grid, "hidden_sizes": self.train.hidden_sizes},
            "eval": dataclasses.asdict(self.eval),
        }

    def hash(self):
        return sha256_hex(canonical_json(self.effective()))
