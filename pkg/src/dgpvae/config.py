"""Experiment configuration files (YAML).

One file drives every command::

    seed: 0
    corpus:
      path: out/corpus
      N: 500
      T: 100
      factors:
        - {name: fast, cardinality: 8, length_scale: 2.0}
      renderer: {kind: mixer, seed: 1234, output_dim: 12, hidden: 32, noise_std: 0.1}
      labels: {factor: 0, threshold: 0.0}
    train:
      output_dir: out/run
      latent_dim: 6
      length_scales: [2.0, 10.0, 50.0]
      ...
    eval:
      predictor: lasso

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    corpus: str
    output_dir: str
    latent_dim: int = 6
    length_scales: list[float] = field(default_factory=lambda: [20.0, 10.0, 5.0, 2.5])
    beta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    subsection_length: int = 25
    subsection_mode: str = "sequential"
    epochs: int = 1
    seed: int = 0
    mc_samples: int = 1
    posterior: str = "structured"
    obs_variance: float = 1.0
    prior_jitter: float = 1e-3
    encoder: dict = field(default_factory=lambda: {
        "temporal_filters": 32, "temporal_width": 3, "ff_layers": 1, "ff_width": 64})
    decoder: dict = field(default_factory=lambda: {"ff_layers": 2, "ff_width": 64})

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.subsection_length < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("subsection_length, batch_size and latent_dim must be >= 1")
        if not self.length_scales or any(l <= 0 for l in self.length_scales):
            raise ConfigError("length_scales must be a non-empty list of positive values")
        if self.subsection_mode not in ("sequential", "random"):
            raise ConfigError(f"unknown subsection_mode {self.subsection_mode!r}")
        if self.posterior not in ("structured", "mean_field"):
            raise ConfigError(f"unknown posterior {self.posterior!r}")
        self.length_scales = [float(l) for l in self.length_scales]

    @property
    def channel_length_scales(self) -> list[float]:
        """Round-robin assignment of the configured scales to latent channels."""
        return [self.length_scales[j % len(self.length_scales)] for j in range(self.latent_dim)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def hash(self) -> str:
        """Hash of the configuration, ignoring where the corpus and run live on disk."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("corpus")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()


def load_experiment(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.resolve().parent
    cfg = copy.deepcopy(cfg)
    for section, key in (("corpus", "path"), ("train", "output_dir"), ("train", "corpus"),
                         ("eval", "concept_map")):
        sec = cfg.get(section)
        if isinstance(sec, dict) and sec.get(key):
            p = Path(sec[key])
            sec[key] = os.path.normpath(p if p.is_absolute() else base / p)
    return cfg


def run_config_from_experiment(cfg: dict, seed: int | None = None) -> RunConfig:
    train = dict(cfg.get("train") or {})
    if "corpus" not in train:
        corpus = (cfg.get("corpus") or {}).get("path")
        if corpus is None:
            raise ConfigError("train.corpus or corpus.path must be set")
        train["corpus"] = corpus
    if "output_dir" not in train:
        raise ConfigError("train.output_dir must be set")
    if seed is not None:
        train["seed"] = seed
    elif "seed" not in train and "seed" in cfg:
        train["seed"] = cfg["seed"]
    return RunConfig.from_dict(train)


def dump_yaml(data: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True, default_flow_style=False))
