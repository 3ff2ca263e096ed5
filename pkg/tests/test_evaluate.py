import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mccan.cycles import DomainChain
from mccan.data import RoiSpec, read_pgm
from mccan.evaluate import (EvalSummary, cycle_walk, denoise, evaluate_dataset, roi_stats,
                            write_report_csv)
from mccan.nn import ArchConfig, IdentityGenerator, ModelBank, build_model_bank

XZY = DomainChain(("X", "Z", "Y"))
TINY = ArchConfig(residual_blocks=1, base_channels=4, patch_levels=2)


class CountingGen(IdentityGenerator):
    calls = 0

    def __call__(self, x):
        CountingGen.calls += 1
        return x


def _identity_bank(chain, cls=IdentityGenerator):
    return ModelBank(chain, {e: cls(*e) for e in chain.edges()}, {})


ROIS = [RoiSpec(1, (1, 1, 5, 5), 0.5), RoiSpec(2, (8, 2, 6, 5), 0.3)]
images = arrays(np.float64, (16, 16), elements=st.floats(-1, 1, allow_nan=False, width=32))


def test_roi_of_zero_and_two():
    img = np.zeros((4, 4))
    img[:, 2:] = 2.0
    row = roi_stats(img, [RoiSpec(1, (1, 0, 2, 4), 1.0)], np.ones((4, 4))).rows[0]
    assert (row.mean, row.sd) == (1.0, 1.0)
    assert row.abs_dev_true == 1.0


def test_constant_roi_has_zero_sd(rng):
    img = rng.uniform(size=(16, 16))
    img[1:6, 1:6] = 0.37
    assert roi_stats(img, ROIS[:1], img + 1).rows[0].sd == 0.0


@given(images)
def test_image_against_itself_is_exactly_one(img):
    for row in roi_stats(img, ROIS, img).rows:
        assert (row.normalized_mean, row.normalized_sd) == (1.0, 1.0)


@given(images, st.floats(-5, 5, allow_nan=False))
def test_sd_translation_invariant(img, c):
    a = roi_stats(img, ROIS, img).rows
    b = roi_stats(img + c, ROIS, img).rows
    for ra, rb in zip(a, b):
        assert rb.sd == pytest.approx(ra.sd, rel=1e-9, abs=1e-9)
        assert rb.mean == pytest.approx(ra.mean + c, abs=1e-9)


def test_population_sd(rng):
    img = rng.normal(size=(16, 16))
    row = roi_stats(img, ROIS[:1], np.ones((16, 16))).rows[0]
    assert row.sd == pytest.approx(np.std(img[1:6, 1:6], ddof=0), rel=1e-12)


def test_roi_errors():
    img = np.zeros((8, 8))
    with pytest.raises(ValueError, match="empty"):
        roi_stats(img, [RoiSpec(3, (0, 0, 0, 4), 0.0)], img)
    with pytest.raises(ValueError, match="bounds"):
        roi_stats(img, [RoiSpec(3, (6, 6, 4, 4), 0.0)], img)
    with pytest.raises(ValueError, match="differs"):
        roi_stats(img, ROIS[:1], np.zeros((9, 9)))


@pytest.mark.parametrize("chain,hops", [(DomainChain(("X", "Y")), 1), (XZY, 2),
                                        (DomainChain(("X", "Z1", "Z2", "Y")), 3)])
def test_denoise_identity_and_hop_count(chain, hops, rng):
    CountingGen.calls = 0
    x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
    out = denoise(_identity_bank(chain, CountingGen), x, chain)
    assert CountingGen.calls == hops
    assert np.array_equal(out, x)


def test_denoise_chain_mismatch(rng):
    with pytest.raises(ValueError, match="chain"):
        denoise(_identity_bank(XZY), np.zeros((8, 8)), DomainChain(("X", "Y")))


def test_denoise_range_and_determinism(rng):
    bank = build_model_bank(XZY, TINY, seed=4)
    x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
    out = denoise(bank, x, XZY)
    assert out.shape == x.shape and np.all(np.abs(out) <= 1)
    assert np.array_equal(out, denoise(bank, x, XZY))


def test_cycle_walk_identity(tmp_path, rng):
    x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
    walk = cycle_walk(_identity_bank(XZY), x, tmp_path)
    assert [d for d, _ in walk] == ["X", "Z", "Y", "Z", "X"]
    assert walk[0][1] is not None and np.array_equal(walk[0][1], x)
    assert all(np.array_equal(img, x) for _, img in walk)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["walk_0_X.pgm", "walk_1_Z.pgm", "walk_2_Y.pgm", "walk_3_Z.pgm", "walk_4_X.pgm",
                     "walk_strip.pgm"]
    assert read_pgm(tmp_path / "walk_strip.pgm").shape == (16, 80)


def test_cycle_walk_first_entry_is_input_for_trained_bank(rng):
    x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
    walk = cycle_walk(build_model_bank(XZY, TINY, seed=0), x)
    assert np.array_equal(walk[0][1], x)
    assert len(walk) == 5


def test_cycle_walk_needs_three_chain():
    with pytest.raises(ValueError, match="3-domain"):
        cycle_walk(_identity_bank(DomainChain(("X", "Y"))), np.zeros((8, 8)))


def test_evaluate_dataset_identity_is_one(rng, tmp_path):
    imgs = [rng.uniform(-1, 1, (16, 16)).astype(np.float32) for _ in range(3)]
    rois = [[RoiSpec(i, (i, i, 5, 5), 0.5) for i in range(1, 6)]] * 3
    summary = evaluate_dataset(_identity_bank(XZY), XZY, imgs, rois)
    assert isinstance(summary, EvalSummary)
    assert summary.area_mean == {k: 1.0 for k in range(1, 6)}
    assert summary.area_sd == {k: 1.0 for k in range(1, 6)}
    write_report_csv(tmp_path / "r.csv", summary.per_image)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == 1 + 15 and lines[0].startswith("image,roi,mean,sd")
