"""Run configuration: one YAML document per experiment.

Layout (``version: 1``)::

    version: 1
    experiment: train          # geometry | train | sample | ablate-schedules | truncation
    seed: 0
    generator: {kind: shell, channels: 8, height: 4, width: 4, intrinsic_dim: 8, n: 20000, ...}
    denoiser:  {hidden: 64, layers: 4, heads: 4, ...}
    trainer:   {mode: x, steps: 2000, batch_size: 128, lr: 0.001, ...}
    sampler:   {solver: heun, schedule: timeshift, K: 50, guidance_scale: 3.7, ...}
    geometry:  {subsample: 5000, bootstraps: 10, ...}

Every section is optional and falls back to the dataclass defaults.  Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .denoiser import DenoiserConfig
from .sampler import SamplerConfig
from .synthdata import GeneratorSpec
from .trainer import TrainConfig

CONFIG_VERSION = 1
EXPERIMENTS = ("geometry", "train", "sample", "ablate-schedules", "truncation")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    n: int = 20000
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n < 4:
            raise ConfigError("generator.n must be >= 4")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("generator.train_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {**self.spec.to_dict(), "n": self.n, "train_fraction": self.train_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        extra = {k: d.pop(k) for k in ("n", "train_fraction") if k in d}
        _reject_unknown("generator", d, GeneratorSpec)
        return cls(GeneratorSpec(**d), **extra)


@dataclass(frozen=True)
class GeometryConfig:
    subsample: int = 5000
    bootstraps: int = 10
    n_components: int = 512
    interpolation_pairs: int = 64
    interpolation_steps: int = 11
    oracle_reference: int = 50000

    def __post_init__(self):
        if self.subsample < 3 or self.bootstraps < 1:
            raise ConfigError("geometry.subsample >= 3 and bootstraps >= 1 required")
        if self.interpolation_steps < 2 or self.interpolation_pairs < 1:
            raise ConfigError("geometry.interpolation_steps >= 2 and interpolation_pairs >= 1 required")


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "train"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to the generator and trainer."""
        return replace(
            self,
            seed=seed,
            data=replace(self.data, spec=replace(self.data.spec, seed=seed)),
            trainer=replace(self.trainer, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "experiment": self.experiment,
            "seed": self.seed,
            "generator": self.data.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "trainer": self.trainer.to_dict(),
            "sampler": self.sampler.to_dict(),
            "geometry": asdict(self.geometry),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        allowed = {"experiment", "seed", "generator", "denoiser", "trainer", "sampler", "geometry"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        sections = {}
        try:
            if "generator" in d:
                sections["data"] = DataConfig.from_dict(d["generator"])
            for key, typ, conv in (("denoiser", DenoiserConfig, None),
                                   ("trainer", TrainConfig, TrainConfig.from_dict),
                                   ("sampler", SamplerConfig, SamplerConfig.from_dict),
                                   ("geometry", GeometryConfig, None)):
                if key in d:
                    _reject_unknown(key, d[key], typ)
                    sections[key] = conv(d[key]) if conv else typ(**d[key])
            cfg = cls(experiment=d.get("experiment", "train"), seed=int(d.get("seed", 0)), **sections)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def _reject_unknown(section: str, d: dict, typ) -> None:
    names = {f.name for f in fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return RunConfig.from_dict(raw or {})


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
