"""Synthetic piecewise-constant phantoms, tiered noise and noise-level partitioning.

Images live in [0, 1] while being built and are rescaled to [-1, 1] once
noise has been added and clipped.
"""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

MAD_TO_SIGMA = 1.4826  # 1 / Phi^-1(3/4)
HIGHPASS = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)
HIGHPASS_NORM = float(np.sqrt((HIGHPASS ** 2).sum()))


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    min_primitives: int = 3
    max_primitives: int = 8
    min_rois: int = 5
    roi_half_width: int = 4  # ROI squares are at most (2h+1)^2
    roi_margin: int = 3      # clearance between an ROI and any intensity edge
    intensity_range: tuple = (0.35, 0.85)
    min_contrast: float = 0.1

    def __post_init__(self):
        self.intensity_range = tuple(self.intensity_range)
        for name in ("height", "width"):
            v = getattr(self, name)
            if v <= 0 or v % 8:
                raise ValueError(f"SceneSpec.{name}={v} must be a positive multiple of 8")
        if not 1 <= self.max_primitives:
            raise ValueError("max_primitives must be >= 1")


@dataclass(frozen=True)
class Primitive:
    kind: str  # "ellipse" or "rect"
    intensity: float
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        if self.kind == "rect":
            return (np.abs(dy) <= self.ry) & (np.abs(dx) <= self.rx)
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


@dataclass(frozen=True)
class RoiSpec:
    id: int
    rect: tuple  # (x, y, w, h): column, row, width, height
    true_intensity: float

    @property
    def area(self) -> int:
        return self.rect[2] * self.rect[3]

    def slice(self):
        x, y, w, h = self.rect
        return slice(y, y + h), slice(x, x + w)

    def validate(self, shape) -> None:
        x, y, w, h = self.rect
        if w <= 0 or h <= 0:
            raise ValueError(f"ROI {self.id} is empty: {self.rect}")
        if x < 0 or y < 0 or x + w > shape[-1] or y + h > shape[-2]:
            raise ValueError(f"ROI {self.id} {self.rect} exceeds image bounds {tuple(shape[-2:])}")


@dataclass
class PhantomScene:
    seed: int
    canvas: np.ndarray  # clean image in [0, 1]
    background: float
    primitives: list
    roi_specs: list
    labels: np.ndarray = field(repr=False)


def _largest_square(mask: np.ndarray, margin: int, hmax: int):
    """Centre and half-width of the biggest square kept ``margin`` px inside ``mask``."""
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
    idx = int(np.argmax(dist))
    r, c = divmod(idx, mask.shape[1])
    h = min(hmax, int(dist[r, c]) - 1 - margin)
    return r, c, h


def _find_rois(labels: np.ndarray, intensities: dict, spec: SceneSpec) -> list[RoiSpec]:
    taken = np.zeros(labels.shape, dtype=bool)
    rois = []

    def claim(label: int) -> bool:
        free = (labels == label) & ~taken
        r, c, h = _largest_square(free, spec.roi_margin, spec.roi_half_width)
        if h < 2:  # 5x5 = 25 px minimum
            return False
        rois.append(RoiSpec(len(rois) + 1, (c - h, r - h, 2 * h + 1, 2 * h + 1), intensities[label]))
        pad = spec.roi_margin
        taken[max(r - h - pad, 0):r + h + pad + 1, max(c - h - pad, 0):c + h + pad + 1] = True
        return True

    for label in sorted(k for k in intensities if k > 0):
        claim(label)
    # background fills the remainder, at least one
    claim(0)
    while len(rois) < spec.min_rois and claim(0):
        pass
    return rois


def synth_scene(seed: int, spec: SceneSpec | None = None, max_attempts: int = 50) -> PhantomScene:
    """Piecewise-constant phantom with homogeneous ROIs, deterministic in ``seed``."""
    spec = spec or SceneSpec()
    h, w = spec.height, spec.width
    rng = np.random.default_rng([seed, 0x5CE7E])
    lo, hi = spec.intensity_range
    levels = np.round(np.arange(lo, hi + 1e-9, 0.05), 4)
    for _ in range(max_attempts):
        background = float(rng.choice(levels[(levels >= 0.45) & (levels <= 0.55)]))
        n = int(rng.integers(min(spec.min_primitives, spec.max_primitives), spec.max_primitives + 1))
        labels = np.zeros((h, w), dtype=np.int16)
        canvas = np.full((h, w), background, dtype=np.float64)
        prims = []
        intensities = {0: background}
        for i in range(n):
            choices = levels[np.abs(levels - background) >= spec.min_contrast - 1e-9]
            val = float(rng.choice(choices))
            kind = "ellipse" if rng.random() < 0.6 else "rect"
            ry = float(rng.uniform(0.08, 0.25) * h)
            rx = float(rng.uniform(0.08, 0.25) * w)
            cy = float(rng.uniform(ry + 2, h - ry - 3))
            cx = float(rng.uniform(rx + 2, w - rx - 3))
            angle = float(rng.uniform(0, np.pi)) if kind == "ellipse" else 0.0
            p = Primitive(kind, val, cy, cx, ry, rx, angle)
            m = p.mask(h, w)
            canvas[m] = val
            labels[m] = i + 1
            intensities[i + 1] = val
            prims.append(p)
        rois = _find_rois(labels, intensities, spec)
        if len(rois) >= spec.min_rois:
            return PhantomScene(seed, canvas.astype(np.float32), background, prims, rois, labels)
    raise RuntimeError(f"could not place {spec.min_rois} ROIs for seed {seed} in {max_attempts} attempts")


# noise

@dataclass(frozen=True)
class TierNoise:
    gaussian_sigma: float
    streak_amplitude: float = 0.0


@dataclass
class NoiseModel:
    tiers: dict  # domain id -> TierNoise, ordered noisiest first
    streak_count: int = 6
    seed: int = 0

    def __post_init__(self):
        self.tiers = {k: v if isinstance(v, TierNoise) else TierNoise(**v) for k, v in self.tiers.items()}
        vals = list(self.tiers.values())
        for a, b in zip(vals, vals[1:]):
            if not a.gaussian_sigma > b.gaussian_sigma:
                raise ValueError(f"tier sigmas must strictly decrease from noisy to clean: {vals}")
            if a.streak_amplitude < b.streak_amplitude:
                raise ValueError(f"streak amplitudes must not increase from noisy to clean: {vals}")
        if vals and (vals[-1].gaussian_sigma < 0 or vals[-1].streak_amplitude < 0):
            raise ValueError("noise parameters must be non-negative")

    @classmethod
    def for_chain(cls, domains, sigma_noisy: float = 0.25, sigma_clean: float = 0.02,
                  intermediate_sigmas=None, streak_noisy: float = 0.06, streak_clean: float = 0.0,
                  streak_count: int = 6, seed: int = 0) -> "NoiseModel":
        """Intermediate sigmas default to a geometric ladder between the endpoints."""
        domains = list(domains)
        n = len(domains)
        if intermediate_sigmas is None:
            t = np.arange(1, n - 1) / (n - 1)
            if sigma_clean > 0:
                intermediate_sigmas = list(sigma_noisy * (sigma_clean / sigma_noisy) ** t)
            else:
                intermediate_sigmas = list(sigma_noisy * (1 - t))
        if len(intermediate_sigmas) != n - 2:
            raise ValueError(f"need {n - 2} intermediate sigmas, got {len(intermediate_sigmas)}")
        sigmas = [sigma_noisy, *intermediate_sigmas, sigma_clean]
        streaks = np.linspace(streak_noisy, streak_clean, n)
        tiers = {d: TierNoise(float(s), float(a)) for d, s, a in zip(domains, sigmas, streaks)}
        return cls(tiers, streak_count, seed)


def _tier_key(tier) -> int:
    return zlib.crc32(str(tier).encode())


def streak_pattern(shape, count: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Signed lines through a point near the centre, roughly like CT streaks."""
    h, w = shape
    out = np.zeros(shape, dtype=np.float64)
    if count <= 0 or amplitude == 0:
        return out
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h / 2 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    for _ in range(count):
        theta = rng.uniform(0, np.pi)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        d = (xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta)
        out += sign * amplitude * np.exp(-0.5 * (d / 0.8) ** 2)
    return out


def to_model_range(img01: np.ndarray) -> np.ndarray:
    return (np.asarray(img01, dtype=np.float32) * 2 - 1).astype(np.float32)


def to_intensity(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float32) + 1) / 2


def apply_noise(scene: PhantomScene, model: NoiseModel, tier) -> np.ndarray:
    """Noisy version of ``scene`` at ``tier``, clipped to [0,1] then mapped to [-1,1]."""
    if tier not in model.tiers:
        raise KeyError(f"noise model has no tier {tier!r}; known tiers: {list(model.tiers)}")
    cfg = model.tiers[tier]
    rng = np.random.default_rng([model.seed, scene.seed, _tier_key(tier)])
    img = scene.canvas.astype(np.float64)
    if cfg.gaussian_sigma > 0:
        img = img + rng.normal(0.0, cfg.gaussian_sigma, size=img.shape)
    img = img + streak_pattern(img.shape, model.streak_count, cfg.streak_amplitude, rng)
    return to_model_range(np.clip(img, 0.0, 1.0))


def estimate_noise(img: np.ndarray) -> float:
    """Gaussian-consistent MAD estimate of the noise SD from a high-pass residual."""
    r = signal.convolve2d(np.asarray(img, dtype=np.float64), HIGHPASS, mode="valid")
    mad = np.median(np.abs(r - np.median(r)))
    return float(MAD_TO_SIGMA * mad / HIGHPASS_NORM)


@dataclass
class DomainDataset:
    domain: object
    images: list
    provenance: list  # scene seed per image
    rois: list | None = None  # per-image ROI lists, kept for evaluation sets

    def __len__(self):
        return len(self.images)


def partition_by_noise(pool, k: int, domains=None, seeds=None) -> list[DomainDataset]:
    """Split ``pool`` into k+2 near-equal buckets ordered noisiest first.

    Ties in the noise estimate are broken by pool index.
    """
    pool = [np.asarray(getattr(p, "data", p)) for p in pool]
    n_buckets = k + 2
    if k < 0:
        raise ValueError("k must be >= 0")
    if len(pool) < 3 * n_buckets:
        raise ValueError(f"pool of {len(pool)} images is too small for {n_buckets} buckets "
                         f"(need at least {3 * n_buckets})")
    if domains is None:
        mids = ["Z"] if k == 1 else [f"Z{i}" for i in range(1, k + 1)]
        domains = ["X", *mids, "Y"]
    seeds = list(range(len(pool))) if seeds is None else list(seeds)
    sigma = np.array([estimate_noise(img) for img in pool])
    # noisiest first; lexsort's last key is primary
    order = np.lexsort((np.arange(len(pool)), -sigma))
    out = []
    for dom, idx in zip(domains, np.array_split(order, n_buckets)):
        idx = sorted(int(i) for i in idx)
        out.append(DomainDataset(dom, [pool[i] for i in idx], [seeds[i] for i in idx]))
    return out


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image {h}x{w}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return img[..., r:r + size, c:c + size]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MCCAN_THREADS", "1")))
    except ValueError:
        return 1


def synth_scenes(seeds, spec: SceneSpec) -> list[PhantomScene]:
    """Scenes for ``seeds`` in seed order, fanned out over MCCAN_THREADS workers."""
    seeds = list(seeds)
    n = _threads()
    if n == 1:
        return [synth_scene(s, spec) for s in seeds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda s: synth_scene(s, spec), seeds))


def make_domain_datasets(domains, spec: SceneSpec, noise: NoiseModel, per_domain: int,
                         seed: int = 0) -> list[DomainDataset]:
    """One dataset per domain, each built from its own disjoint block of scene seeds."""
    out = []
    base = seed * 1_000_000
    for i, dom in enumerate(domains):
        seeds = range(base + i * per_domain, base + (i + 1) * per_domain)
        scenes = synth_scenes(seeds, spec)
        out.append(DomainDataset(dom, [apply_noise(s, noise, dom) for s in scenes], list(seeds)))
    return out


def make_eval_dataset(domain, spec: SceneSpec, noise: NoiseModel, count: int, seed: int = 0,
                      offset: int = 900_000) -> DomainDataset:
    """Held-out noisy images with their ROIs; seeds never overlap training blocks."""
    seeds = range(seed * 1_000_000 + offset, seed * 1_000_000 + offset + count)
    scenes = synth_scenes(seeds, spec)
    return DomainDataset(domain, [apply_noise(s, noise, domain) for s in scenes], list(seeds),
                         [s.roi_specs for s in scenes])


# image I/O

PGM_MAX = 65535


def write_pgm(path, img: np.ndarray) -> None:
    """16-bit binary PGM; [-1,1] maps linearly onto 0..65535."""
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    q = np.round((np.clip(img, -1, 1) + 1) / 2 * PGM_MAX).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    dt = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(raw[pos:], dtype=dt, count=w * h).reshape(h, w)
    return (q.astype(np.float64) / maxval * 2 - 1).astype(np.float32)


def save_dataset(ds: DomainDataset, out_dir, prefix: str = "") -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, seed) in enumerate(zip(ds.images, ds.provenance)):
        name = f"{prefix}{ds.domain}_{i:04d}.pgm"
        write_pgm(out_dir / name, img)
        entry = {"file": name, "domain": str(ds.domain), "seed": int(seed)}
        if ds.rois is not None:
            entry["rois"] = [{"id": r.id, "rect": list(r.rect), "true_intensity": r.true_intensity}
                             for r in ds.rois[i]]
        entries.append(entry)
    return entries


def write_manifest(path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"images": entries}, indent=2) + "\n")


def load_manifest(path) -> dict[str, DomainDataset]:
    """Datasets keyed by domain id, images read from files next to the manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    by_domain: dict[str, DomainDataset] = {}
    for e in doc["images"]:
        ds = by_domain.setdefault(e["domain"], DomainDataset(e["domain"], [], [], None))
        ds.images.append(read_pgm(path.parent / e["file"]))
        ds.provenance.append(e["seed"])
        if "rois" in e:
            if ds.rois is None:
                ds.rois = []
            ds.rois.append([RoiSpec(r["id"], tuple(r["rect"]), r["true_intensity"]) for r in e["rois"]])
    return by_domain


def scene_spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["intensity_range"] = list(spec.intensity_range)
    return d
