"""Alternating discriminator/generator updates over a compiled loss graph."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cycles import (DomainChain, LossGraph, Variant, adversarial_terms, compile_loss_graph,
                     cycle_terms, enumerate_cycles, identity_loss, nonsaturating_terms, run_prefixes)
from .data import DomainDataset, random_crop
from .nn import ArchConfig, ModelBank, build_model_bank

log = logging.getLogger(__name__)


ADVERSARIAL_FORMS = ("minimax", "nonsaturating")


@dataclass
class TrainConfig:
    lambda_cyc: float = 10.0
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch: int = 1
    steps: int = 3000
    seed: int = 0
    variant: str = "mccan"
    dedup: bool = False
    identity_loss_weight: float = 0.0
    # "minimax": generators minimize the log-loss as written; "nonsaturating": -log D(fake)
    adversarial: str = "minimax"
    crop: int = 32
    checkpoint_every: int = 500
    # CycleGAN recipe pieces not used at desk scale; only the defaults are accepted
    image_pool_size: int = 0
    lr_decay_start: int | None = None

    def __post_init__(self):
        self.variant = Variant.parse(self.variant).value
        if not self.lambda_cyc > 0:
            raise ValueError(f"lambda_cyc must be > 0, got {self.lambda_cyc}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.adversarial not in ADVERSARIAL_FORMS:
            raise ValueError(f"adversarial must be one of {ADVERSARIAL_FORMS}, got {self.adversarial!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.image_pool_size or self.lr_decay_start is not None:
            raise NotImplementedError("image history pool and lr decay are not implemented")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.dtype)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load(self, prefix: str, blobs: dict, t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = blobs[f"{prefix}/m/{k}"].copy()
            self.v[k] = blobs[f"{prefix}/v/{k}"].copy()


@dataclass
class TrainState:
    bank: ModelBank
    graph: LossGraph
    opt_g: Adam
    opt_d: Adam
    step: int = 0


@dataclass
class StepMetrics:
    step: int
    adv_G: float
    adv_D: float
    cyc: float
    per_cycle: dict = field(default_factory=dict)
    identity: float = 0.0

    def row(self) -> list[str]:
        return [str(self.step), repr(self.adv_G), repr(self.adv_D), repr(self.cyc), repr(self.identity),
                *(repr(v) for v in self.per_cycle.values())]


class NonFiniteLoss(FloatingPointError):
    pass


def _check_finite(name: str, value: Tensor) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteLoss(f"non-finite value in loss term {name}: {value.data!r}")


def _sum(values: list[Tensor]) -> Tensor:
    acc = values[0]
    for v in values[1:]:
        acc = acc + v
    return acc


def discriminator_loss(graph: LossGraph, bank: ModelBank, batch: dict, fakes: dict) -> tuple[Tensor, list]:
    """Negated adversarial total with the generator outputs cut from the tape."""
    terms = adversarial_terms(graph, bank, batch, fakes, detach_fakes=True)
    for t, v in terms:
        _check_finite(t.label, v)
    return ad.neg(_sum([v for _, v in terms])), terms


def generator_loss(graph: LossGraph, bank: ModelBank, batch: dict, fakes: dict,
                   cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Adversarial total + lambda * cycle total (+ optional identity term).

    ``parts["adv"]`` is always the log-loss total; with the nonsaturating form
    the optimized adversarial part is the surrogate instead.
    """
    adv = adversarial_terms(graph, bank, batch, fakes)
    cyc = cycle_terms(graph, batch, fakes)
    for t, v in adv + cyc:
        _check_finite(t.label, v)
    adv_total = _sum([v for _, v in adv])
    cyc_total = _sum([v for _, v in cyc])
    objective = adv_total
    if getattr(cfg, "adversarial", "minimax") == "nonsaturating":
        objective = _sum([v for _, v in nonsaturating_terms(graph, bank, fakes)])
    loss = objective + ad.scale(cyc_total, cfg.lambda_cyc)
    idt = None
    if cfg.identity_loss_weight:
        idt = identity_loss(bank, batch, graph.generator_edges)
        _check_finite("identity", idt)
        loss = loss + ad.scale(idt, cfg.identity_loss_weight)
    return loss, {"adv": adv_total, "cyc": cyc_total, "cyc_terms": cyc, "identity": idt}


def train_step(state: TrainState, batch: dict, cfg: TrainConfig) -> StepMetrics:
    """One discriminator ascent step followed by one generator descent step."""
    bank, graph = state.bank, state.graph
    fakes = run_prefixes(graph, bank, batch)

    d_loss, _ = discriminator_loss(graph, bank, batch, fakes)
    state.opt_d.zero_grad()
    ad.backward(d_loss)
    state.opt_d.step()
    state.opt_d.zero_grad()

    # discriminator weights are constants during the generator step
    d_params = list(state.opt_d.params.values())
    for p in d_params:
        p.requires_grad = False
    try:
        g_loss, parts = generator_loss(graph, bank, batch, fakes, cfg)
        state.opt_g.zero_grad()
        ad.backward(g_loss)
        state.opt_g.step()
        state.opt_g.zero_grad()
    finally:
        for p in d_params:
            p.requires_grad = True

    state.step += 1
    return StepMetrics(
        step=state.step,
        adv_G=parts["adv"].item(),
        adv_D=d_loss.item(),
        cyc=parts["cyc"].item(),
        per_cycle={t.label: v.item() for t, v in parts["cyc_terms"]},
        identity=parts["identity"].item() if parts["identity"] is not None else 0.0,
    )


def new_state(chain: DomainChain, cfg: TrainConfig, arch: ArchConfig | None = None) -> TrainState:
    bank = build_model_bank(chain, arch or ArchConfig(), seed=cfg.seed)
    graph = compile_loss_graph(enumerate_cycles(chain, cfg.variant), dedup=cfg.dedup)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return TrainState(bank, graph, Adam(bank.generator_params(), cfg.lr, betas),
                      Adam(bank.discriminator_params(), cfg.lr, betas))


class BatchSampler:
    """Per-domain shuffled epochs with random crops; seeded and domain-independent."""

    def __init__(self, datasets: dict, cfg: TrainConfig):
        self.datasets = datasets
        self.cfg = cfg
        self.rngs = {d: np.random.default_rng([cfg.seed, 0xDA7A, i])
                     for i, d in enumerate(sorted(datasets, key=str))}
        self.queues = {d: [] for d in datasets}

    def _next_index(self, d) -> int:
        if not self.queues[d]:
            self.queues[d] = list(self.rngs[d].permutation(len(self.datasets[d])))
        return int(self.queues[d].pop())

    def sample(self) -> dict:
        out = {}
        for d in sorted(self.datasets, key=str):
            ds = self.datasets[d]
            crops = [random_crop(ds.images[self._next_index(d)], self.cfg.crop, self.rngs[d])
                     for _ in range(self.cfg.batch)]
            out[d] = Tensor(np.stack(crops)[:, None].astype(np.float32))
        return out


def metrics_header(graph: LossGraph) -> list[str]:
    return ["step", "adv_G", "adv_D", "cyc", "identity", *(t.label for t in graph.cyc_terms)]


def train(cfg: TrainConfig, datasets: list[DomainDataset], chain: DomainChain | None = None,
          arch: ArchConfig | None = None, out_dir=None, extra_manifest: dict | None = None,
          progress: bool = False):
    """Run ``cfg.steps`` updates; returns (state, metrics).

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints under
    ``checkpoints/step_XXXXXX`` plus ``checkpoint`` for the final state.
    """
    by_domain = {ds.domain: ds for ds in datasets}
    if chain is None:
        chain = DomainChain(tuple(ds.domain for ds in datasets))
    missing = [d for d in chain.domains if d not in by_domain]
    if missing:
        raise ValueError(f"no dataset for chain domain(s) {missing}; have {list(by_domain)}")
    extra = [d for d in by_domain if d not in chain.domains]
    if extra:
        raise ValueError(f"dataset domain(s) {extra} are not in chain {chain}")
    for d in chain.domains:
        if not len(by_domain[d]):
            raise ValueError(f"dataset for domain {d} is empty")

    state = new_state(chain, cfg, arch)
    sampler = BatchSampler({d: by_domain[d] for d in chain.domains}, cfg)
    metrics: list[StepMetrics] = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(metrics_header(state.graph))
    try:
        for _ in range(cfg.steps):
            m = train_step(state, sampler.sample(), cfg)
            metrics.append(m)
            if writer:
                writer.writerow(m.row())
            if progress and m.step % 100 == 0:
                log.info("step %d adv_G=%.4f adv_D=%.4f cyc=%.4f", m.step, m.adv_G, m.adv_D, m.cyc)
            if out_dir is not None and cfg.checkpoint_every and m.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, cfg, out_dir / "checkpoints" / f"step_{m.step:06d}", extra_manifest)
    finally:
        if fh:
            fh.close()
    if out_dir is not None:
        save_checkpoint(state, cfg, out_dir / "checkpoint", extra_manifest)
    return state, metrics


# checkpoints

def save_checkpoint(state: TrainState, cfg: TrainConfig, path, extra: dict | None = None) -> Path:
    """Directory with ``manifest.json`` and ``tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {f"param/{k}": v for k, v in state.bank.state_dict().items()}
    blobs.update(state.opt_g.state("adam_G"))
    blobs.update(state.opt_d.state("adam_D"))
    entries = ad.save_tensors(blobs, path / "tensors.bin")
    bank = state.bank
    manifest = {
        "format": "mccan-checkpoint/1",
        "step": state.step,
        "chain": [str(d) for d in bank.chain.domains],
        "arch": asdict(bank.arch),
        "train": asdict(cfg),
        "adam_t": {"G": state.opt_g.t, "D": state.opt_d.t},
        "tensors": entries,
    }
    if extra:
        manifest["run"] = extra
    (path / "manifest.json").write_text(ad.manifest_dumps(manifest))
    return path


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint at {path} (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    cfg = TrainConfig(**manifest["train"])
    chain = DomainChain(tuple(manifest["chain"]))
    state = new_state(chain, cfg, ArchConfig(**manifest["arch"]))
    blobs = ad.load_tensors(manifest["tensors"], path / "tensors.bin")
    state.bank.load_state_dict({k[len("param/"):]: v for k, v in blobs.items() if k.startswith("param/")})
    state.opt_g.load("adam_G", blobs, manifest["adam_t"]["G"])
    state.opt_d.load("adam_D", blobs, manifest["adam_t"]["D"])
    state.step = manifest["step"]
    return state, cfg, manifest


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def metrics_csv(graph: LossGraph, metrics: list[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(metrics_header(graph))
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(v) < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")

