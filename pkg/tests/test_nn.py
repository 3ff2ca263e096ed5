import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccan import autodiff as ad
from mccan.autodiff import Tensor
from mccan.cycles import DomainChain
from mccan.nn import ArchConfig, build_model_bank, discriminate, generate
from mccan.train import params_digest

SMALL = ArchConfig(residual_blocks=1, base_channels=4)


def batch(rng, *shape, dtype=np.float32):
    return Tensor(rng.uniform(-1, 1, size=shape).astype(dtype))


@pytest.mark.parametrize("domains,n_gen,n_disc", [
    ("XZY", {("X", "Z"), ("Z", "X"), ("Z", "Y"), ("Y", "Z")}, 3),
    ("XY", {("X", "Y"), ("Y", "X")}, 2),
])
def test_bank_composition(domains, n_gen, n_disc):
    bank = build_model_bank(DomainChain(tuple(domains)), SMALL, seed=0)
    assert set(bank.generators) == n_gen
    assert set(bank.discriminators) == set(domains)
    assert len(bank.discriminators) == n_disc


@given(n=st.integers(2, 6))
@settings(max_examples=5)
def test_bank_count_invariant(n):
    chain = DomainChain(tuple(f"D{i}" for i in range(n)))
    bank = build_model_bank(chain, ArchConfig(residual_blocks=0, base_channels=1), seed=0)
    assert len(bank.generators) == 2 * (n - 1)
    assert len(bank.discriminators) == n


def test_four_domain_bank():
    bank = build_model_bank(DomainChain(("X", "Z1", "Z2", "Y")), SMALL, seed=0)
    assert (len(bank.generators), len(bank.discriminators)) == (6, 4)


def test_short_chain_rejected():
    with pytest.raises(ValueError):
        build_model_bank(["X"], SMALL)


def test_init_determinism_and_distribution():
    a = build_model_bank(DomainChain(("X", "Z", "Y")), ArchConfig(), seed=3)
    b = build_model_bank(DomainChain(("X", "Z", "Y")), ArchConfig(), seed=3)
    c = build_model_bank(DomainChain(("X", "Z", "Y")), ArchConfig(), seed=4)
    assert params_digest(a.parameters()) == params_digest(b.parameters())
    assert params_digest(a.parameters()) != params_digest(c.parameters())
    w = np.concatenate([p.data.ravel() for k, p in a.parameters().items() if k.endswith(".w")])
    assert abs(w.mean()) < 1e-3
    assert w.std() == pytest.approx(0.02, rel=0.02)
    assert all(np.all(p.data == 0) for k, p in a.parameters().items() if k.endswith(".b"))


def test_generator_shape(rng):
    g = build_model_bank(DomainChain(("X", "Y")), ArchConfig(), seed=0).generator("X", "Y")
    assert generate(g, batch(rng, 2, 1, 32, 32)).shape == (2, 1, 32, 32)


@given(h=st.integers(1, 6), w=st.integers(1, 6), n=st.integers(1, 2))
@settings(max_examples=10)
def test_generate_is_shape_invariant(h, w, n):
    g = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=0).generator("X", "Y")
    x = batch(np.random.default_rng(h * 7 + w), n, 1, 4 * h, 4 * w)
    assert generate(g, x).shape == x.shape


def test_generate_rejects_indivisible(rng):
    g = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=0).generator("X", "Y")
    with pytest.raises(ad.ShapeError, match="divisible by 4"):
        generate(g, batch(rng, 1, 1, 30, 32))


def test_zeroed_final_layer_gives_tanh_of_bias(rng):
    g = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=0).generator("X", "Y")
    last = g.dec[1]
    last.weight.data[...] = 0
    last.bias.data[...] = 0.3
    out = generate(g, batch(rng, 1, 1, 16, 16))
    np.testing.assert_allclose(out.data, np.tanh(np.float32(0.3)), rtol=0, atol=1e-7)


def test_random_generator_output_range():
    g = build_model_bank(DomainChain(("X", "Y")), ArchConfig(), seed=1).generator("X", "Y")
    rng = np.random.default_rng(0)
    for _ in range(100):
        out = generate(g, batch(rng, 1, 1, 16, 16)).data
        assert out.min() >= -1 and out.max() <= 1


def test_discriminator_patch_shape(rng):
    d = build_model_bank(DomainChain(("X", "Y")), ArchConfig(), seed=0).discriminator("Y")
    assert discriminate(d, batch(rng, 1, 1, 32, 32)).shape == (1, 1, 4, 4)
    assert d.receptive_field() < 32
    with pytest.raises(ad.ShapeError, match="divisible by 8"):
        discriminate(d, batch(rng, 1, 1, 36, 36))


def test_discriminator_zero_weights(rng):
    d = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=0).discriminator("X")
    for p in d.params().values():
        p.data[...] = 0
    d.head.bias.data[...] = 0.0
    logits = discriminate(d, batch(rng, 2, 1, 16, 16))
    np.testing.assert_array_equal(logits.data, 0)
    np.testing.assert_array_equal(ad.sigmoid(logits).data, 0.5)


def test_discriminator_deterministic(rng):
    d = build_model_bank(DomainChain(("X", "Y")), ArchConfig(), seed=0).discriminator("X")
    x = batch(rng, 1, 1, 32, 32)
    x2 = Tensor(x.data.copy())
    np.testing.assert_array_equal(discriminate(d, x).data, discriminate(d, x2).data)


def test_state_dict_roundtrip():
    a = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=0)
    b = build_model_bank(DomainChain(("X", "Y")), SMALL, seed=9)
    b.load_state_dict(a.state_dict())
    assert params_digest(a.parameters()) == params_digest(b.parameters())


@pytest.mark.parametrize("which", ["generator", "discriminator"])
def test_full_network_gradcheck(which, rng):
    bank = build_model_bank(DomainChain(("X", "Y")), ArchConfig(residual_blocks=1, base_channels=2),
                            seed=5, dtype=np.float64)
    net = bank.generator("X", "Y") if which == "generator" else bank.discriminator("Y")
    # larger init so activations are not all near the kinks
    for p in net.params().values():
        p.data = rng.normal(0, 0.5, size=p.shape)
    x = Tensor(rng.uniform(-1, 1, size=(1, 1, 8, 8)), requires_grad=True, dtype=np.float64)
    proj = Tensor(rng.normal(size=net(x).shape))
    res = ad.grad_check(lambda: ad.sum(net(x) * proj), [x, *net.params().values()], rng, samples=8)
    assert res["checked"] > 30
    assert res["max_rel_error"] < 1e-4, res
