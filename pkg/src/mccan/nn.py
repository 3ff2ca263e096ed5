"""Small CycleGAN-style generators, patch discriminators and the model bank."""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_SD = 0.02


@dataclass
class ArchConfig:
    residual_blocks: int = 3
    base_channels: int = 16
    patch_levels: int = 3

    def __post_init__(self):
        for key in ("residual_blocks", "base_channels", "patch_levels"):
            v = getattr(self, key)
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"ArchConfig.{key} must be an integer, got {v!r}")
        if self.residual_blocks < 0 or self.base_channels < 1 or self.patch_levels < 1:
            raise ValueError(f"invalid ArchConfig {self}")


def _stream(seed: int, name: str) -> np.random.Generator:
    # keyed by name so init does not depend on construction order
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Conv:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, dtype,
                 k: int = 3, stride: int = 1, padding: int = 1):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(rng.normal(0.0, INIT_SD, size=(cout, cin, k, k)).astype(dtype),
                             requires_grad=True, name=f"{name}.w")
        self.bias = Tensor(np.zeros((1, cout, 1, 1), dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.stride, self.padding) + self.bias

    def params(self):
        return [self.weight, self.bias]


class Network:
    """Holds named parameter tensors; subclasses define ``forward``."""

    def params(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            for p in layer.params():
                out[p.name] = p
        return out


def _domain_tag(d) -> str:
    return str(d)


class Generator(Network):
    def __init__(self, src, dst, arch: ArchConfig, seed: int, dtype=np.float32):
        self.src, self.dst = src, dst
        self.name = f"G[{_domain_tag(src)}>{_domain_tag(dst)}]"
        f = arch.base_channels
        rng = _stream(seed, self.name)
        self.enc = [Conv(f"{self.name}.enc0", 1, f, rng, dtype, stride=2),
                    Conv(f"{self.name}.enc1", f, 2 * f, rng, dtype, stride=2)]
        self.res = [(Conv(f"{self.name}.res{i}a", 2 * f, 2 * f, rng, dtype),
                     Conv(f"{self.name}.res{i}b", 2 * f, 2 * f, rng, dtype))
                    for i in range(arch.residual_blocks)]
        self.dec = [Conv(f"{self.name}.dec0", 2 * f, f, rng, dtype),
                    Conv(f"{self.name}.dec1", f, 1, rng, dtype)]
        self.layers = self.enc + [c for pair in self.res for c in pair] + self.dec

    def __call__(self, x: Tensor) -> Tensor:
        return generate(self, x)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.enc:
            x = ad.relu(ad.instance_norm(conv(x)))
        for a, b in self.res:
            h = ad.relu(ad.instance_norm(a(x)))
            x = x + ad.instance_norm(b(h))
        x = ad.relu(ad.instance_norm(self.dec[0](ad.upsample_nearest(x))))
        return ad.tanh(self.dec[1](ad.upsample_nearest(x)))


class IdentityGenerator:
    """Parameter-free stand-in used by tests and degenerate runs."""

    def __init__(self, src, dst):
        self.src, self.dst = src, dst
        self.name = f"G[{_domain_tag(src)}>{_domain_tag(dst)}]"

    def __call__(self, x: Tensor) -> Tensor:
        return x

    def params(self) -> dict[str, Tensor]:
        return {}


class Discriminator(Network):
    def __init__(self, domain, arch: ArchConfig, seed: int, dtype=np.float32):
        self.domain = domain
        self.name = f"D[{_domain_tag(domain)}]"
        self.levels = arch.patch_levels
        rng = _stream(seed, self.name)
        f = arch.base_channels
        chans = [1] + [f * 2 ** i for i in range(arch.patch_levels)]
        self.down = [Conv(f"{self.name}.down{i}", chans[i], chans[i + 1], rng, dtype, stride=2)
                     for i in range(arch.patch_levels)]
        self.head = Conv(f"{self.name}.head", chans[-1], 1, rng, dtype)
        self.layers = self.down + [self.head]

    def __call__(self, x: Tensor) -> Tensor:
        return discriminate(self, x)

    def forward(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.down):
            x = conv(x)
            if i > 0:
                x = ad.instance_norm(x)
            x = ad.leaky_relu(x)
        return self.head(x)

    def receptive_field(self) -> int:
        rf = 3  # head
        for _ in self.down:
            rf = (rf - 1) * 2 + 3
        return rf


def _check_image_batch(op: str, batch: Tensor, multiple: int) -> None:
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise ad.ShapeError(op, "C", f"expected [N,1,H,W], got {batch.shape}")
    h, w = batch.shape[2:]
    for dim, n in (("H", h), ("W", w)):
        if n % multiple:
            raise ad.ShapeError(op, dim, f"spatial size {n} must be divisible by {multiple}")


def generate(g: Generator, batch: Tensor) -> Tensor:
    """Map a [N,1,H,W] batch in [-1,1] through ``g``; H and W must be multiples of 4."""
    _check_image_batch("generate", batch, 4)
    return g.forward(batch)


def discriminate(d: Discriminator, batch: Tensor) -> Tensor:
    """Pre-sigmoid patch logits of shape [N,1,H/2^L,W/2^L]."""
    _check_image_batch("discriminate", batch, 2 ** d.levels)
    return d.forward(batch)


class ModelBank:
    def __init__(self, chain, generators: dict, discriminators: dict, arch: ArchConfig | None = None):
        self.chain = chain
        self.generators = generators
        self.discriminators = discriminators
        self.arch = arch

    def generator(self, src, dst):
        try:
            return self.generators[(src, dst)]
        except KeyError:
            raise KeyError(f"model bank has no generator {src}->{dst}") from None

    def discriminator(self, domain):
        try:
            return self.discriminators[domain]
        except KeyError:
            raise KeyError(f"model bank has no discriminator for domain {domain}") from None

    def generator_params(self) -> dict[str, Tensor]:
        out = {}
        for key in sorted(self.generators, key=str):
            out.update(self.generators[key].params())
        return out

    def discriminator_params(self) -> dict[str, Tensor]:
        out = {}
        for key in sorted(self.discriminators, key=str):
            out.update(self.discriminators[key].params())
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.generator_params(), **self.discriminator_params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, t in params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ad.ShapeError("load_state_dict", name, f"{arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def snapshot(self) -> "ModelBank":
        """Independent deep copy, safe to evaluate while the original trains."""
        return copy.deepcopy(self)


def build_model_bank(chain, arch: ArchConfig | None = None, seed: int = 0, dtype=np.float32) -> ModelBank:
    """Two generators per adjacent domain pair and one discriminator per domain."""
    domains = list(getattr(chain, "domains", chain))
    if len(domains) < 2:
        raise ValueError(f"a domain chain needs at least 2 domains, got {domains}")
    arch = arch or ArchConfig()
    gens = {}
    for a, b in zip(domains, domains[1:]):
        gens[(a, b)] = Generator(a, b, arch, seed, dtype)
        gens[(b, a)] = Generator(b, a, arch, seed, dtype)
    discs = {d: Discriminator(d, arch, seed, dtype) for d in domains}
    return ModelBank(chain, gens, discs, arch)
