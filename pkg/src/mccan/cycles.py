"""Cycle enumeration over a domain chain and the loss graph compiled from it.

A chain ``X - Z - Y`` has one generator per directed adjacent pair. Cycles
are closed walks on that chain: *local* cycles bounce across one adjacent
pair, *global* cycles run end to end and back. Every prefix of a cycle is an
adversarial path: it starts at the cycle's source domain, and the
discriminator of the domain it ends on judges its output. Each cycle also
contributes one L1 cycle-consistency term.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Variant(str, enum.Enum):
    MCCAN = "mccan"
    CCADN = "ccadn"
    NO_LOCAL = "mccan-no-local"
    NO_GLOBAL = "mccan-no-global"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {value!r}; expected one of {names}") from None


class CycleKind(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class DomainChain:
    domains: tuple

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if len(self.domains) < 2:
            raise ValueError(f"a domain chain needs at least 2 domains, got {list(self.domains)}")
        if len(set(self.domains)) != len(self.domains):
            raise ValueError(f"domain ids must be unique, got {list(self.domains)}")

    @classmethod
    def parse(cls, text: str) -> "DomainChain":
        """``"X,Z,Y"`` or ``"X-Z-Y"``."""
        sep = "," if "," in text else "-"
        return cls(tuple(p.strip() for p in text.split(sep) if p.strip()))

    @classmethod
    def with_intermediates(cls, k: int) -> "DomainChain":
        if k < 0:
            raise ValueError("k must be >= 0")
        mids = ["Z"] if k == 1 else [f"Z{i}" for i in range(1, k + 1)]
        return cls(("X", *mids, "Y"))

    def __len__(self):
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    @property
    def noisy(self):
        return self.domains[0]

    @property
    def clean(self):
        return self.domains[-1]

    def edges(self) -> list[tuple]:
        d = self.domains
        return [e for a, b in zip(d, d[1:]) for e in ((a, b), (b, a))]

    def reversed(self) -> "DomainChain":
        return DomainChain(self.domains[::-1])

    def __str__(self):
        return "-".join(map(str, self.domains))


def _fmt(walk) -> str:
    return "->".join(map(str, walk))


@dataclass(frozen=True)
class Cycle:
    id: str
    source: object
    walk: tuple  # domains visited, first == last == source
    kind: CycleKind

    @property
    def hops(self) -> tuple:
        return tuple(zip(self.walk, self.walk[1:]))

    def prefixes(self) -> list["PathPrefix"]:
        h = self.hops
        return [PathPrefix(self.id, j, self.walk[j], h[:j]) for j in range(1, len(h) + 1)]

    def __str__(self):
        return _fmt(self.walk)


@dataclass(frozen=True)
class PathPrefix:
    cycle_id: str
    length: int
    end_domain: object
    generator_sequence: tuple  # edges (src, dst) in application order

    @property
    def source(self):
        return self.generator_sequence[0][0]

    @property
    def walk(self) -> tuple:
        return (self.source,) + tuple(e[1] for e in self.generator_sequence)


@dataclass(frozen=True)
class AdvTerm:
    end_domain: object
    generator_sequence: tuple
    source_domain: object
    cycle_ids: tuple = ()

    @property
    def walk(self) -> tuple:
        return (self.source_domain,) + tuple(e[1] for e in self.generator_sequence)

    @property
    def label(self) -> str:
        return f"adv[{_fmt(self.walk)}]"


@dataclass(frozen=True)
class CycTerm:
    cycle_id: str
    generator_sequence: tuple
    source_domain: object

    @property
    def walk(self) -> tuple:
        return (self.source_domain,) + tuple(e[1] for e in self.generator_sequence)

    @property
    def label(self) -> str:
        return f"cyc[{_fmt(self.walk)}]"


@dataclass(frozen=True)
class LossGraph:
    adv_terms: tuple
    cyc_terms: tuple
    dedup: bool = False

    @property
    def domains(self) -> set:
        out = set()
        for t in self.adv_terms:
            out.update(t.walk)
        for t in self.cyc_terms:
            out.update(t.walk)
        return out

    @property
    def generator_edges(self) -> set:
        return {e for t in self.adv_terms + self.cyc_terms for e in t.generator_sequence}

    def describe(self) -> str:
        lines = [f"adv_terms: {len(self.adv_terms)} (dedup={'on' if self.dedup else 'off'})"]
        for t in self.adv_terms:
            lines.append(f"  D[{t.end_domain}] <- {_fmt(t.walk)}  cycles={','.join(t.cycle_ids)}")
        lines.append(f"cyc_terms: {len(self.cyc_terms)}")
        for t in self.cyc_terms:
            lines.append(f"  {t.cycle_id}: {_fmt(t.walk)}")
        return "\n".join(lines)


def _local_walks(chain: DomainChain) -> list[tuple]:
    out = []
    for a, b in zip(chain.domains, chain.domains[1:]):
        out += [(a, b, a), (b, a, b)]
    return out


def _global_walks(chain: DomainChain) -> list[tuple]:
    d = chain.domains
    return [d + d[-2::-1], d[::-1] + d[1:]]


def enumerate_cycles(chain: DomainChain, variant: Variant | str = Variant.MCCAN) -> list[Cycle]:
    """Cycles of one model variant; locals first (left to right), then globals."""
    variant = Variant.parse(variant)
    if not isinstance(chain, DomainChain):
        chain = DomainChain(tuple(chain))
    if variant is Variant.CCADN:
        if len(chain) != 2:
            raise ValueError(f"CCADN needs a 2-domain chain, got {len(chain)} domains ({chain})")
        walks = [(w, CycleKind.LOCAL) for w in _local_walks(chain)]
    else:
        walks = []
        if variant in (Variant.MCCAN, Variant.NO_GLOBAL):
            walks += [(w, CycleKind.LOCAL) for w in _local_walks(chain)]
        if variant in (Variant.MCCAN, Variant.NO_LOCAL):
            walks += [(w, CycleKind.GLOBAL) for w in _global_walks(chain)]
    # a 2-chain's global cycle coincides with its locals; keep one copy
    cycles, seen = [], set()
    for walk, kind in walks:
        if walk in seen:
            continue
        seen.add(walk)
        cycles.append(Cycle(f"C{len(cycles) + 1}", walk[0], walk, kind))
    return cycles


def compile_loss_graph(cycles: list[Cycle], dedup: bool = False) -> LossGraph:
    """One adversarial term per cycle prefix, one cycle term per cycle."""
    if not cycles:
        raise ValueError("cannot compile a loss graph from zero cycles")
    adv: list[AdvTerm] = []
    index: dict[tuple, int] = {}
    for c in cycles:
        for p in c.prefixes():
            key = p.generator_sequence
            if dedup and key in index:
                prev = adv[index[key]]
                adv[index[key]] = AdvTerm(prev.end_domain, key, prev.source_domain,
                                          prev.cycle_ids + (c.id,))
                continue
            index.setdefault(key, len(adv))
            adv.append(AdvTerm(p.end_domain, key, c.source, (c.id,)))
    cyc = [CycTerm(c.id, c.hops, c.source) for c in cycles]
    return LossGraph(tuple(adv), tuple(cyc), dedup)


# evaluation

@dataclass
class Losses:
    """Scalar totals plus per-term values.

    ``adv_G`` is the summed log-loss as the generators see it (they minimize
    it); ``adv_D`` is its negation, which the discriminators minimize.
    """

    adv_G: Tensor
    adv_D: Tensor
    cyc: Tensor
    adv_terms: list = field(default_factory=list)  # (AdvTerm, Tensor)
    cyc_terms: list = field(default_factory=list)  # (CycTerm, Tensor)
    identity: Tensor | None = None

    def __iter__(self):
        return iter((self.adv_G, self.adv_D, self.cyc))


def _require(batch: dict, domain):
    if domain not in batch:
        raise KeyError(f"batch has no real minibatch for domain {domain!r}")
    return batch[domain]


def run_prefixes(graph: LossGraph, bank, batch: dict) -> dict[tuple, Tensor]:
    """Apply every distinct generator sequence once, sharing common prefixes."""
    out: dict[tuple, Tensor] = {}
    for term in graph.adv_terms + graph.cyc_terms:
        seq = term.generator_sequence
        for j in range(1, len(seq) + 1):
            key = seq[:j]
            if key in out:
                continue
            x = out[seq[:j - 1]] if j > 1 else _require(batch, term.source_domain)
            out[key] = bank.generator(*key[-1])(x)
    return out


def log_prob_real(logits: Tensor) -> Tensor:
    return ad.mean(ad.log(ad.sigmoid(logits)))


def log_prob_fake(logits: Tensor) -> Tensor:
    return ad.mean(ad.log(1.0 - ad.sigmoid(logits)))


def _total(values: list[Tensor], like: Tensor) -> Tensor:
    if not values:
        return Tensor(np.zeros((), dtype=like.dtype))
    acc = values[0]
    for v in values[1:]:
        acc = acc + v
    return acc


def adversarial_terms(graph: LossGraph, bank, batch: dict, fakes: dict,
                      detach_fakes: bool = False) -> list[tuple[AdvTerm, Tensor]]:
    """Per-term log-loss  E[log D_I(y)] + E[log(1 - D_I(G_P(x)))]."""
    real_cache: dict = {}
    fake_cache: dict = {}
    out = []
    for term in graph.adv_terms:
        dom = term.end_domain
        if dom not in real_cache:
            real_cache[dom] = log_prob_real(bank.discriminator(dom)(_require(batch, dom)))
        key = term.generator_sequence
        if key not in fake_cache:
            fake = fakes[key].detach() if detach_fakes else fakes[key]
            fake_cache[key] = log_prob_fake(bank.discriminator(dom)(fake))
        out.append((term, real_cache[dom] + fake_cache[key]))
    return out


def nonsaturating_terms(graph: LossGraph, bank, fakes: dict) -> list[tuple[AdvTerm, Tensor]]:
    """Generator-side surrogate  -E[log D_I(G_P(x))]  per adversarial term.

    Same fixed point as the log-loss but keeps a useful gradient once the
    discriminator confidently rejects the fakes.
    """
    cache: dict = {}
    out = []
    for term in graph.adv_terms:
        key = term.generator_sequence
        if key not in cache:
            cache[key] = ad.neg(log_prob_real(bank.discriminator(term.end_domain)(fakes[key])))
        out.append((term, cache[key]))
    return out


def cycle_terms(graph: LossGraph, batch: dict, fakes: dict) -> list[tuple[CycTerm, Tensor]]:
    return [(t, ad.l1_distance(fakes[t.generator_sequence], _require(batch, t.source_domain)))
            for t in graph.cyc_terms]


def identity_loss(bank, batch: dict, edges) -> Tensor:
    """Sum over generators A->B of mean |G(b) - b| for real b from B."""
    vals = []
    for a, b in sorted(edges, key=str):
        y = _require(batch, b)
        vals.append(ad.l1_distance(bank.generator(a, b)(y), y))
    return _total(vals, next(iter(batch.values())))


def evaluate_losses(graph: LossGraph, bank, batch: dict, identity: bool = False) -> Losses:
    """Adversarial and cycle-consistency totals for one unpaired minibatch set."""
    for dom in sorted(graph.domains, key=str):
        _require(batch, dom)
    like = next(iter(batch.values()))
    fakes = run_prefixes(graph, bank, batch)
    adv = adversarial_terms(graph, bank, batch, fakes)
    cyc = cycle_terms(graph, batch, fakes)
    adv_g = _total([v for _, v in adv], like)
    losses = Losses(adv_g, ad.neg(adv_g), _total([v for _, v in cyc], like), adv, cyc)
    if identity:
        losses.identity = identity_loss(bank, batch, graph.generator_edges)
    return losses


def term_counts(graph: LossGraph) -> dict:
    return {
        "cycles": len(graph.cyc_terms),
        "adv_terms": len(graph.adv_terms),
        "adv_by_end": dict(sorted(Counter(str(t.end_domain) for t in graph.adv_terms).items())),
    }
