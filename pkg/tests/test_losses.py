import pytest
import torch

from dfrnet import DFRNet, ModelConfig
from dfrnet.layers import DimensionError
from dfrnet.losses import (
    LossWeights,
    RandomConvPyramid,
    combine,
    l_ldr,
    l_perceptual,
    l_rd,
    l_rec,
    total_loss,
)


def test_l_rec_value():
    a = torch.zeros(1, 3, 4, 4)
    assert l_rec(a + 0.25, a).item() == pytest.approx(0.25)
    with pytest.raises(DimensionError):
        l_rec(a, torch.zeros(1, 3, 4, 2))


def test_perceptual_zero_on_identical_and_frozen():
    ext = RandomConvPyramid()
    x = torch.rand(1, 3, 16, 16)
    assert l_perceptual(x, x, ext).item() == 0
    assert l_perceptual(x, torch.rand_like(x), ext).item() > 0
    assert not any(p.requires_grad for p in ext.parameters())
    again = RandomConvPyramid.from_state(ext.state_dict())
    assert all(torch.equal(p, q) for p, q in zip(ext.parameters(), again.parameters()))


def test_rd_constructed_cases():
    g = torch.Generator().manual_seed(0)
    feats = [torch.randn(2, 4, 3, 3, generator=g) for _ in range(7)]
    assert l_rd(feats, feats).item() == pytest.approx(7.0, abs=1e-6)
    assert l_rd([-f for f in feats], feats).item() == pytest.approx(-7.0, abs=1e-6)
    a = [torch.tensor([[1.0, 0.0]]) for _ in range(7)]
    b = [torch.tensor([[0.0, 1.0]]) for _ in range(7)]
    assert l_rd(a, b).item() == 0.0
    z = [torch.zeros(1, 2) for _ in range(7)]
    assert l_rd(z, a).item() == 0.0


def test_rd_stage_mismatch():
    with pytest.raises(DimensionError):
        l_rd([torch.ones(1, 2)] * 7, [torch.ones(1, 2)] * 6)


def test_ldr_constant_offset():
    target = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    inters = [torch.nn.functional.avg_pool2d(target, k) + 0.125 for k in (1, 2, 4, 8)]
    assert l_ldr(inters, target).item() == pytest.approx(0.125, abs=1e-12)
    assert l_ldr([], target).item() == 0
    with pytest.raises(DimensionError):
        l_ldr([torch.zeros(2, 3, 5, 5)], target)


def test_total_decomposition_and_flags():
    cfg = ModelConfig.toy()
    m = DFRNet(cfg, seed=0)
    x, y = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    out = m(x)
    w = LossWeights()
    rep = total_loss(out, y, w, cfg, RandomConvPyramid())
    assert rep.total.item() == pytest.approx(combine(rep.rec, rep.perceptual, rep.rd, rep.ldr, w), rel=1e-6)
    off = total_loss(out, y, w, cfg.with_flags(["siamese"]), RandomConvPyramid())
    assert off.rd == 0 and off.ldr == 0


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(perceptual=-1)
