"""Train-and-score helpers shared by the acceptance suite and scripts/."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, build_datasets
from .data import to_intensity
from .evaluate import EvalSummary, cycle_walk, evaluate_dataset
from .train import train


@dataclass
class VariantResult:
    variant: str
    seed: int
    summary: EvalSummary
    seconds: float
    walk_sd: np.ndarray | None = None  # per test image, ROI SD at each walk position
    state: object = field(default=None, repr=False)

    @property
    def mean_normalized_sd(self) -> float:
        return self.summary.mean_normalized_sd

    @property
    def walk_monotone_fraction(self) -> float | None:
        if self.walk_sd is None:
            return None
        return float(np.mean([a > b > c for a, b, c in self.walk_sd[:, :3]]))


def walk_roi_sd(bank, images, rois_per_image) -> np.ndarray:
    """Mean ROI SD (intensity space) at each of the 5 walk positions, per image."""
    rows = []
    for img, rois in zip(images, rois_per_image):
        walk = cycle_walk(bank, img)
        rows.append([np.mean([to_intensity(x)[r.slice()].astype(np.float64).std() for r in rois])
                     for _, x in walk])
    return np.asarray(rows)


def run_variant(cfg: RunConfig, variant: str | None = None, out_dir=None) -> VariantResult:
    """Train ``cfg`` (optionally with another variant) and score the held-out set."""
    if variant is not None:
        cfg = replace(cfg, variant=variant)
    datasets, test = build_datasets(cfg)
    t0 = time.perf_counter()
    state, _ = train(cfg.train, datasets, chain=cfg.chain, arch=cfg.arch, out_dir=out_dir,
                     extra_manifest=cfg.to_dict() if out_dir is not None else None)
    seconds = time.perf_counter() - t0
    summary = evaluate_dataset(state.bank, cfg.chain, test.images, test.rois)
    walk = None
    if len(cfg.chain) == 3:
        walk = walk_roi_sd(state.bank, test.images, test.rois)
    return VariantResult(cfg.variant, cfg.seed, summary, seconds, walk, state)


def acceptance_config(seed: int = 0, steps: int = 3000, **train_overrides) -> RunConfig:
    """Desk-scale setup: 64x64 phantoms, sigma tiers 0.25 / 0.10 / 0.02."""
    cfg = RunConfig(seed=seed)
    cfg.noise = replace(cfg.noise, intermediate_sigmas=[0.10])
    cfg.train = replace(cfg.train, steps=steps, identity_loss_weight=5.0, adversarial="nonsaturating",
                        **train_overrides)
    return replace(cfg)
