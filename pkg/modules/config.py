"""
Run configuration
One YAML document per run, loaded into frozen dataclasses. CLI overrides use
dotted keys (``mitigation.seed``); ``PROXYFAIR_SEED`` overrides the global seed.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from modules.autoencoder import AutoencoderConfig
from modules.clustering import METHODS, ClusteringConfig
from modules.errors import ConfigError
from modules.mitigation import ALGORITHMS, MitigationConfig
from modules.nncore import config_digest
from modules.probe import ProbeConfig
from modules.separation import SeparationConfig
from modules.transformer import TransformerConfig

logger = logging.getLogger(__name__)

SEED_ENV = "PROXYFAIR_SEED"
EMBEDDERS = ("ae", "transformer")
GROUP_SIGNALS = ("true", "proxy")
SOURCES = ("adult", "synthetic")


@dataclass(frozen=True)
class DataConfig:
    source: str = "adult"
    paths: tuple[str, ...] = ("data/adult.data", "data/adult.test")
    test_frac: float = 0.2
    synthetic_rows: int = 2000
    corr_strength: float = 1.0
    label_bias: float = 1.0

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"data.source must be one of {SOURCES}, got {self.source}")
        if not 0.0 < self.test_frac < 1.0:
            raise ValueError(f"data.test_frac must be in (0, 1), got {self.test_frac}")
        if self.synthetic_rows <= 0:
            raise ValueError("data.synthetic_rows must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    artifact_dir: str = "artifacts"
    embedder: str = "ae"
    clusterer: str = "kmeans"
    mitigator: str = "erm"
    group_signal: str = "proxy"
    workers: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    separation: SeparationConfig = field(default_factory=SeparationConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self) -> None:
        for key, value, allowed in (
            ("embedder", self.embedder, EMBEDDERS),
            ("clusterer", self.clusterer, METHODS),
            ("mitigator", self.mitigator, ALGORITHMS),
            ("group_signal", self.group_signal, GROUP_SIGNALS),
        ):
            if value not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got '{value}'")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def embedder_config(self, embedder: str | None = None) -> AutoencoderConfig | TransformerConfig:
        """Embedder section with the global seed and shared separation settings applied"""
        name = embedder or self.embedder
        base = self.autoencoder if name == "ae" else self.transformer
        return replace(base, seed=self.seed, separation=self.separation)

    def mitigation_config(self, algorithm: str | None = None, seed: int | None = None,
                          variant: str | None = None) -> MitigationConfig:
        return replace(
            self.mitigation,
            algorithm=algorithm or self.mitigator,
            seed=self.mitigation.seed if seed is None else seed,
            variant=variant or self.mitigation.variant,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "autoencoder": AutoencoderConfig,
    "transformer": TransformerConfig,
    "separation": SeparationConfig,
    "clustering": ClusteringConfig,
    "mitigation": MitigationConfig,
    "probe": ProbeConfig,
}
_TUPLE_KEYS = {("data", "paths"), ("mitigation", "seeds")}


def _build_section(name: str, raw: Any) -> Any:
    cls = SECTIONS[name]
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)} - {"separation"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    values = {
        k: tuple(v) if (name, k) in _TUPLE_KEYS and isinstance(v, (list, tuple)) else v
        for k, v in raw.items()
    }
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _apply_override(document: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    if len(parts) > 2 or (len(parts) == 2 and parts[0] not in SECTIONS):
        raise ConfigError(f"unknown config key '{key}'")
    if len(parts) == 1:
        document[key] = value
    else:
        section = document.setdefault(parts[0], {}) or {}
        section[parts[1]] = value
        document[parts[0]] = section


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """YAML document, then CLI overrides, then the seed environment variable"""
    document: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        document = dict(loaded or {})

    for key, value in (overrides or {}).items():
        if value is not None:
            _apply_override(document, key, value)

    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            document["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got '{env_seed}'") from None
        logger.info("Global seed %s taken from %s", document["seed"], SEED_ENV)

    top_level = {f.name for f in fields(RunConfig)} - set(SECTIONS)
    unknown = set(document) - top_level - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    sections = {name: _build_section(name, document.get(name)) for name in SECTIONS}
    scalars = {k: v for k, v in document.items() if k in top_level}
    try:
        return RunConfig(**scalars, **sections)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(*parts: Any) -> str:
    """SHA-256 of the canonical JSON of the given config sections"""
    return config_digest([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts])


def dump_config(config: RunConfig) -> str:
    document = json.loads(json.dumps(config.to_dict()))
    # embedder sections take separation from the top-level section
    for name in ("autoencoder", "transformer"):
        document[name].pop("separation", None)
    return yaml.safe_dump(document, sort_keys=True)
