"""Run configuration: one JSON document that fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cycles import DomainChain, Variant
from .data import (DomainDataset, NoiseModel, SceneSpec, make_domain_datasets, make_eval_dataset,
                   partition_by_noise)
from .nn import ArchConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class NoiseSpec:
    sigma_noisy: float = 0.25
    sigma_clean: float = 0.02
    intermediate_sigmas: list | None = None  # None: geometric ladder
    streak_noisy: float = 0.06
    streak_clean: float = 0.0
    streak_count: int = 6
    seed: int = 0


@dataclass
class DataSpec:
    per_domain: int = 64
    eval_images: int = 16
    source: str = "tiers"  # or "partition": pool all tiers, re-split by estimated noise

    def __post_init__(self):
        if self.source not in ("tiers", "partition"):
            raise ConfigError(f"data.source must be 'tiers' or 'partition', got {self.source!r}")


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "mccan"
    k: int = 1
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSpec = field(default_factory=DataSpec)
    out: str = "runs/default"

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).value
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        # top-level seed and variant are authoritative
        self.train.seed = self.seed
        self.train.variant = self.variant

    @property
    def noise_chain(self) -> DomainChain:
        """All noise tiers, which is the training chain except for CCADN."""
        return DomainChain.with_intermediates(self.k)

    @property
    def chain(self) -> DomainChain:
        if self.variant == Variant.CCADN.value:
            return DomainChain(("X", "Y"))
        return self.noise_chain

    def noise_model(self) -> NoiseModel:
        n = self.noise
        return NoiseModel.for_chain(self.noise_chain.domains, n.sigma_noisy, n.sigma_clean,
                                    n.intermediate_sigmas, n.streak_noisy, n.streak_clean,
                                    n.streak_count, n.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"]["intensity_range"] = list(self.scene.intensity_range)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"scene": SceneSpec, "noise": NoiseSpec, "arch": ArchConfig, "train": TrainConfig, "data": DataSpec}


def _line_of(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), start=1):
        if f'"{key}"' in line:
            return i
    return None


def _build(cls, values: dict, where: str, text: str, source: str):
    names = {f.name for f in fields(cls)}
    for key in values:
        if key not in names:
            line = _line_of(text, key)
            at = f"{source}:{line}" if line else source
            raise ConfigError(f"{at}: unknown key '{key}' in {where}")
    try:
        return cls(**values)
    except (TypeError, ValueError, NotImplementedError) as e:
        raise ConfigError(f"{source}: invalid {where}: {e}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    top = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{source}:{_line_of(text, key)}: section '{key}' must be an object")
            top[key] = _build(_SECTIONS[key], value, key, text, source)
        else:
            top[key] = value
    return _build(RunConfig, top, "run config", text, source)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(), str(path))


def build_datasets(cfg: RunConfig) -> tuple[list[DomainDataset], DomainDataset]:
    """Training datasets for ``cfg.chain`` and the held-out noisy evaluation set."""
    model = cfg.noise_model()
    domains = cfg.noise_chain.domains
    tiers = make_domain_datasets(domains, cfg.scene, model, cfg.data.per_domain, seed=cfg.seed)
    if cfg.data.source == "partition":
        pool = [img for ds in tiers for img in ds.images]
        seeds = [s for ds in tiers for s in ds.provenance]
        tiers = partition_by_noise(pool, len(domains) - 2, domains=domains, seeds=seeds)
    by_domain = {ds.domain: ds for ds in tiers}
    train_sets = [by_domain[d] for d in cfg.chain.domains]
    test = make_eval_dataset(domains[0], cfg.scene, model, cfg.data.eval_images, seed=cfg.seed)
    return train_sets, test
