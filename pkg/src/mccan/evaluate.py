"""Inference along the chain, ROI mean/SD scoring and cycle-walk dumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import RoiSpec, to_intensity, write_pgm


def _as_batch(x) -> Tensor:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    return Tensor(arr)


def _check_bank(bank, chain) -> list:
    domains = list(getattr(chain, "domains", chain))
    bank_domains = list(getattr(bank.chain, "domains", bank.chain))
    if domains != bank_domains:
        raise ValueError(f"model bank was built for chain {bank_domains}, not {domains}")
    return domains


def denoise(bank, x, chain) -> np.ndarray:
    """Apply the generators from the noisy end of ``chain`` to the clean end."""
    domains = _check_bank(bank, chain)
    out = _as_batch(x)
    for a, b in zip(domains, domains[1:]):
        out = bank.generator(a, b)(out)
    arr = out.data
    return arr.reshape(arr.shape[-2:]) if np.ndim(getattr(x, "data", x)) == 2 else arr


@dataclass
class RoiRow:
    id: int
    mean: float
    sd: float
    normalized_mean: float
    normalized_sd: float
    true_intensity: float | None = None
    abs_dev_true: float | None = None  # mean |pixel - ground truth|


@dataclass
class RoiReport:
    rows: list = field(default_factory=list)

    def by_id(self) -> dict[int, RoiRow]:
        return {r.id: r for r in self.rows}

    @property
    def mean_normalized_sd(self) -> float:
        return float(np.mean([r.normalized_sd for r in self.rows]))


def _ratio(value: float, base: float) -> float:
    if value == base:
        return 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.float64(value) / np.float64(base))


def _mean_sd(a: np.ndarray) -> tuple[float, float]:
    # shifted by the first pixel so constant regions give exactly (value, 0)
    ref = a.flat[0]
    d = a - ref
    return float(ref + d.mean()), float(d.std())


def roi_stats(img, rois: list[RoiSpec], baseline) -> RoiReport:
    """Per-ROI mean and population SD, each also divided by the baseline's value."""
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    base = np.asarray(getattr(baseline, "data", baseline), dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    base = base.reshape(base.shape[-2:])
    if img.shape != base.shape:
        raise ValueError(f"image shape {img.shape} differs from baseline {base.shape}")
    rows = []
    for roi in rois:
        roi.validate(img.shape)
        a, b = img[roi.slice()], base[roi.slice()]
        if a.size == 0:
            raise ValueError(f"ROI {roi.id} is empty")
        (m, s), (bm, bs) = _mean_sd(a), _mean_sd(b)
        dev = None
        if roi.true_intensity is not None:
            dev = float(np.abs(a - roi.true_intensity).mean())
        rows.append(RoiRow(roi.id, m, s, _ratio(m, bm), _ratio(s, bs), roi.true_intensity, dev))
    return RoiReport(rows)


def score_image(bank, chain, noisy, rois) -> tuple[np.ndarray, RoiReport]:
    """Denoise one model-range image and score it in [0,1] intensity space."""
    out = denoise(bank, noisy, chain)
    return out, roi_stats(to_intensity(out), rois, to_intensity(noisy))


@dataclass
class EvalSummary:
    per_image: list  # RoiReport per test image
    area_mean: dict  # ROI id -> normalized mean averaged over images
    area_sd: dict    # ROI id -> normalized SD averaged over images

    @property
    def mean_normalized_sd(self) -> float:
        return float(np.mean(list(self.area_sd.values())))


def evaluate_dataset(bank, chain, images, rois_per_image, areas: int = 5) -> EvalSummary:
    """Table-style summary: ROI ids 1..areas averaged across the test images."""
    reports = [score_image(bank, chain, img, rois)[1] for img, rois in zip(images, rois_per_image)]
    area_mean, area_sd = {}, {}
    for k in range(1, areas + 1):
        rows = [r.by_id()[k] for r in reports if k in r.by_id()]
        area_mean[k] = float(np.mean([r.normalized_mean for r in rows]))
        area_sd[k] = float(np.mean([r.normalized_sd for r in rows]))
    return EvalSummary(reports, area_mean, area_sd)


def write_report_csv(path, reports: list[RoiReport], image_names=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "roi", "mean", "sd", "normalized_mean", "normalized_sd",
                    "true_intensity", "abs_dev_true"])
        for i, rep in enumerate(reports):
            name = image_names[i] if image_names else str(i)
            for r in rep.rows:
                w.writerow([name, r.id, repr(r.mean), repr(r.sd), repr(r.normalized_mean),
                            repr(r.normalized_sd), repr(r.true_intensity), repr(r.abs_dev_true)])


def write_strip(path, images: list[np.ndarray]) -> None:
    """Side-by-side PGM of equally sized images."""
    write_pgm(path, np.concatenate([np.asarray(i).reshape(i.shape[-2:]) for i in images], axis=1))


def cycle_walk(bank, x, out_dir=None) -> list[tuple]:
    """Images along X->Z->Y->Z->X for a 3-domain bank; first entry is ``x`` itself."""
    domains = list(getattr(bank.chain, "domains", bank.chain))
    if len(domains) != 3:
        raise ValueError(f"cycle_walk needs a 3-domain bank, got chain {domains}")
    walk = domains + domains[-2::-1]
    first = np.asarray(getattr(x, "data", x), dtype=np.float32)
    cur = _as_batch(first)
    out = [(walk[0], first)]
    for a, b in zip(walk, walk[1:]):
        cur = bank.generator(a, b)(cur)
        out.append((b, cur.data.reshape(first.shape)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, (dom, img) in enumerate(out):
            write_pgm(out_dir / f"walk_{i}_{dom}.pgm", img)
        write_strip(out_dir / "walk_strip.pgm", [img for _, img in out])
    return out
