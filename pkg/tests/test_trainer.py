import math

import numpy as np
import pytest
import torch

from dfrnet import ModelConfig
from dfrnet.haze import DataError, HazeScene, apply_asm, make_clear, make_depth
from dfrnet.trainer import (
    PROFILES,
    NumericError,
    TrainConfig,
    center_crop8,
    evaluate,
    load_model,
    lr_at,
    make_optimizer,
    parse_config_file,
    patch_size_at,
    pretrain_pig,
    read_log,
    sample_batch,
    train,
    train_config_from,
)


def tiny_cfg(**kw):
    base = dict(total_iters=4, schedule=((16, 0),), batch_size=2, ckpt_interval=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedules:
    def test_lr_endpoints_and_mid(self):
        cfg = TrainConfig(total_iters=100)
        assert lr_at(0, cfg) == pytest.approx(1e-4)
        assert lr_at(100, cfg) == pytest.approx(1e-6)
        assert lr_at(50, cfg) == pytest.approx(0.5 * (1e-4 + 1e-6))
        lrs = [lr_at(i, cfg) for i in range(101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        with pytest.raises(ValueError):
            lr_at(101, cfg)

    def test_patch_schedule(self):
        cfg = TrainConfig()
        assert [patch_size_at(i, cfg) for i in (0, 999, 1000, 1999, 2000, 2999)] == [32, 32, 48, 48, 64, 64]

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(schedule=((32, 5),))
        with pytest.raises(ValueError):
            TrainConfig(schedule=((30, 0),))
        with pytest.raises(ValueError):
            TrainConfig(schedule=((64, 0), (32, 10)))

    def test_profiles(self):
        assert PROFILES["desk"].total_iters == 3000 and PROFILES["desk"].model == "toy"
        assert PROFILES["desk"].lr_max == 5e-4
        assert PROFILES["paper"].total_iters == 600_000 and PROFILES["paper"].batch_size == 8
        assert PROFILES["paper"].lr_max == 1e-4 and PROFILES["paper"].lr_min == 1e-6

    def test_config_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\ntotal_iters = 7\nlr_max = 2e-4\nschedule = 16:0,24:3\n")
        cfg = train_config_from("desk", parse_config_file(p))
        assert cfg.total_iters == 7 and cfg.lr_max == 2e-4 and cfg.schedule == ((16, 0), (24, 3))
        with pytest.raises(ValueError):
            train_config_from("desk", {"bogus": 1})
        p.write_text("no equals sign\n")
        with pytest.raises(ValueError):
            parse_config_file(p)


class TestBatches:
    def test_deterministic_per_iteration(self, toy_data):
        _, pairs = toy_data
        from dfrnet.trainer import pairs_to_tensors

        h, c = pairs_to_tensors(pairs)
        cfg = tiny_cfg()
        a = sample_batch(h, c, 5, cfg)
        b = sample_batch(h, c, 5, cfg)
        assert torch.equal(a[0], b[0]) and a[2] == b[2]
        assert a[0].shape == (2, 3, 16, 16)
        assert not torch.equal(a[0], sample_batch(h, c, 6, cfg)[0])

    def test_flip_commutes_with_asm(self):
        H = W = 16
        clear, depth = make_clear(H, W, 1), make_depth("radial", H, W, 1)
        beta, A = np.full((1, H, W), 0.15), np.array([0.8, 0.9, 0.85])
        hazy = apply_asm(HazeScene(clear, depth, beta, A))
        for axis in (-1, -2):
            flipped = apply_asm(HazeScene(np.flip(clear, axis).copy(), np.flip(depth, axis).copy(), beta, A))
            assert np.array_equal(flipped, np.flip(hazy, axis))

    def test_center_crop(self):
        x = np.zeros((3, 21, 18))
        assert center_crop8(x).shape == (3, 16, 16)


def test_adamw_matches_reference_update():
    cfg = TrainConfig(lr_max=1e-2, weight_decay=0.1)
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    opt = make_optimizer([p], cfg)
    ref = p.detach().clone()
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    for t in range(1, 4):
        loss = (p**2 * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum()
        opt.zero_grad()
        loss.backward()
        g = 2 * ref * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        opt.step()
        ref = ref * (1 - 1e-2 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref = ref - 1e-2 * mhat / (vhat.sqrt() + 1e-8)
        assert torch.allclose(p.detach(), ref, atol=1e-12)


def test_train_writes_log_and_checkpoints(toy_data, tmp_path):
    _, pairs = toy_data
    state = train(ModelConfig.toy(), tiny_cfg(), pairs, out=tmp_path)
    rows = read_log(tmp_path / "loss_log.csv")
    assert [r["iter"] for r in rows] == [1, 2, 3, 4]
    assert (tmp_path / "ckpt_0000002.zip").exists() and (tmp_path / "last.zip").exists()
    model, meta = load_model(tmp_path / "last.zip")
    assert int(meta["iteration"]) == 4
    for a, b in zip(model.parameters(), state.model.parameters()):
        assert torch.equal(a, b)
    assert rows[0]["lr"] == pytest.approx(1e-4)
    for r in rows:
        w = tiny_cfg().weights
        assert r["total"] == pytest.approx(r["rec"] + w.perceptual * r["perceptual"] + w.rd * r["rd"] + w.ldr * r["ldr"], rel=1e-5)


def test_nan_aborts_with_snapshot(toy_data, tmp_path):
    _, pairs = toy_data
    bad = [(np.full_like(h, np.nan), c) for h, c in pairs]
    with pytest.raises(NumericError) as e:
        train(ModelConfig.toy(), tiny_cfg(), bad, out=tmp_path)
    assert e.value.snapshot["iteration"] == 0
    assert "iteration = 0" in (tmp_path / "nan_snapshot.txt").read_text()


def test_empty_dataset():
    with pytest.raises(DataError):
        train(ModelConfig.toy(), tiny_cfg(), [])
    with pytest.raises(DataError):
        pretrain_pig([], 1)


def test_pretrain_pig_reduces_loss(toy_data):
    _, pairs = toy_data
    pig, losses = pretrain_pig(pairs, 60, seed=0, lr=1e-3)
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_evaluate_identity_callable(toy_data):
    _, pairs = toy_data
    res = evaluate(lambda x: x, pairs)
    assert len(res.ids) == 4
    assert math.isfinite(res.psnr_db) and 0 < res.ssim < 1


def test_pretrain_pig_zero_steps_and_determinism(toy_data):
    _, pairs = toy_data
    from dfrnet.layers import init_weights
    from dfrnet.pig import PIG

    pig0, losses = pretrain_pig(pairs, 0, seed=2)
    ref = PIG(ModelConfig.toy().pig)
    init_weights(ref, torch.Generator().manual_seed(2))
    assert losses == []
    assert all(torch.equal(a, b) for a, b in zip(pig0.parameters(), ref.parameters()))
    a, _ = pretrain_pig(pairs, 3, seed=2)
    b, _ = pretrain_pig(pairs, 3, seed=2)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_pretrained_proposal_is_less_hazy(toy_data):
    _, pairs = toy_data
    pig, _ = pretrain_pig(pairs, 200, seed=0)
    hazy = torch.from_numpy(np.stack([h for h, _ in pairs])).float()
    clear = torch.from_numpy(np.stack([c for _, c in pairs])).float()
    with torch.no_grad():
        P = pig(hazy)
    assert (P - clear).abs().mean() < (hazy - clear).abs().mean()


def test_pig_trains_end_to_end():
    from dfrnet import DFRNet
    from dfrnet.losses import RandomConvPyramid, total_loss

    m = DFRNet(ModelConfig.toy(), seed=0)
    x, y = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    total_loss(m(x), y, extractor=RandomConvPyramid()).total.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.pig.parameters())
    assert m.alpha.grad is not None
