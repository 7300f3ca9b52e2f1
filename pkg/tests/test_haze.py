import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfrnet.haze import (
    D_MAX,
    HazeScene,
    apply_asm,
    generate_dataset,
    invert_asm,
    load_pairs,
    make_clear,
    make_depth,
    make_transmission,
    read_manifest,
    read_meta,
)
from dfrnet.layers import DimensionError


def scene(seed, H=16, W=16, beta=0.1):
    rng = np.random.default_rng(seed)
    return HazeScene(
        clear=make_clear(H, W, seed),
        depth=make_depth("value_noise", H, W, seed),
        beta=np.full((1, H, W), beta),
        airlight=rng.uniform(0.7, 1.0, 3),
    )


class TestDepth:
    def test_ramp_rows_constant_linear(self):
        d = make_depth("ramp", 8, 8, 3)
        assert d.shape == (1, 8, 8)
        assert np.all(d[0] == d[0, :, :1])
        np.testing.assert_allclose(d[0, :, 0], np.linspace(0, D_MAX, 8))

    def test_deterministic(self):
        for kind in ("ramp", "radial", "value_noise"):
            assert np.array_equal(make_depth(kind, 8, 8, 5), make_depth(kind, 8, 8, 5))

    def test_seeds_differ(self):
        assert np.any(make_depth("value_noise", 16, 16, 1) != make_depth("value_noise", 16, 16, 2))

    @pytest.mark.parametrize("kind", ["ramp", "radial", "value_noise"])
    def test_range(self, kind):
        d = make_depth(kind, 12, 20, 9)
        assert d.min() >= 0 and d.max() <= D_MAX + 1e-12

    def test_too_small(self):
        with pytest.raises(DimensionError):
            make_depth("ramp", 4, 8, 0)


class TestTransmission:
    def test_zero_beta_or_depth(self):
        d = make_depth("radial", 8, 8, 0)
        assert np.all(make_transmission(d, np.zeros_like(d)) == 1)
        assert np.all(make_transmission(np.zeros_like(d), np.full_like(d, 3.0)) == 1)

    def test_half(self):
        t = make_transmission(np.ones((1, 1, 1)), np.full((1, 1, 1), 0.693147))
        assert t.item() == pytest.approx(0.5, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            make_transmission(np.ones((1, 8, 8)), np.ones((1, 8, 9)))

    @given(
        st.floats(0, 5), st.floats(0, 5), st.floats(0, 10), st.floats(0, 10),
    )
    def test_monotone(self, b1, b2, d1, d2):
        lo_b, hi_b = sorted((b1, b2))
        lo_d, hi_d = sorted((d1, d2))
        t = lambda b, d: make_transmission(np.full((1, 1, 1), d), np.full((1, 1, 1), b)).item()
        assert t(hi_b, lo_d) <= t(lo_b, lo_d)
        assert t(lo_b, hi_d) <= t(lo_b, lo_d)
        assert 0 < t(hi_b, hi_d) <= 1


class TestASM:
    def test_identity_when_t_one(self):
        s = scene(0, beta=0.0)
        assert np.array_equal(apply_asm(s), s.clear)

    def test_airlight_when_t_zero(self):
        s = scene(1)
        t = np.zeros((1, 16, 16))
        A = s.airlight[:, None, None]
        hazy = s.clear * t + A * (1 - t)
        assert np.allclose(hazy, np.broadcast_to(A, hazy.shape))
        # same through apply_asm with a huge optical depth
        s2 = HazeScene(s.clear, np.full((1, 16, 16), D_MAX), np.full((1, 16, 16), 100.0), s.airlight)
        np.testing.assert_allclose(apply_asm(s2), np.broadcast_to(A, hazy.shape), atol=1e-12)

    def test_pixel_value(self):
        # J = 0.2, t = 0.5, A = 0.9 -> 0.55
        H = W = 8
        s = HazeScene(
            np.full((3, H, W), 0.2), np.ones((1, H, W)), np.full((1, H, W), np.log(2.0)), np.full(3, 0.9)
        )
        np.testing.assert_allclose(apply_asm(s), 0.55, atol=1e-12)

    def test_invert_identity(self):
        s = scene(2)
        hazy = apply_asm(s)
        np.testing.assert_allclose(invert_asm(hazy, np.ones((1, 16, 16)), s.airlight), hazy, atol=1e-15)

    def test_invert_airlight_fixed_point(self):
        # I = A  =>  J = (A - A(1 - t)) / t = A for any t >= t_min
        A = np.array([0.8, 0.85, 0.9])
        hazy = np.broadcast_to(A[:, None, None], (3, 8, 8)).copy()
        for tv in (0.05, 0.3, 0.99):
            J = invert_asm(hazy, np.full((1, 8, 8), tv), A)
            np.testing.assert_allclose(J, hazy, atol=1e-12)

    def test_invert_rejects_bad_tmin(self):
        with pytest.raises(ValueError):
            invert_asm(np.zeros((3, 8, 8)), np.ones((1, 8, 8)), np.ones(3), t_min=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.0, 0.3))
    def test_round_trip(self, seed, beta):
        s = scene(seed, beta=beta)
        t = s.transmission
        hazy = apply_asm(s, clamp=False)
        J = invert_asm(hazy, t, s.airlight)
        ok = (t >= 0.05) & np.all((hazy > 0) & (hazy < 1), axis=0, keepdims=True)
        ok = np.broadcast_to(ok, J.shape)
        assert np.abs(J - s.clear)[ok].max(initial=0) < 1e-6

    def test_hazy_equals_clear_iff_beta_zero(self):
        assert np.array_equal(apply_asm(scene(3, beta=0.0)), scene(3, beta=0.0).clear)
        assert not np.array_equal(apply_asm(scene(3, beta=0.01)), scene(3).clear)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestDataset:
    def test_layout_and_determinism(self, tmp_path):
        m1 = generate_dataset(4, 16, 16, (0.5, 2.0), 7, tmp_path / "a")
        generate_dataset(4, 16, 16, (0.5, 2.0), 7, tmp_path / "b")
        assert len(m1) == 4
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
        for sub in ("hazy", "clear", "meta"):
            assert len(list((tmp_path / "a" / sub).iterdir())) == 4
        meta = read_meta(tmp_path / "a" / "meta" / "00000.txt")
        assert meta["depth_kind"] in ("ramp", "radial", "value_noise")
        assert read_manifest(tmp_path / "a").entries == m1.entries

    def test_zero_beta_gives_identical_pairs(self, tmp_path):
        pairs = load_pairs(generate_dataset(3, 16, 16, (0.0, 0.0), 1, tmp_path))
        for hazy, clear in pairs:
            assert np.array_equal(hazy, clear)

    def test_mean_intensity_grows_with_beta(self, tmp_path):
        means = []
        for i, b in enumerate((0.0, 0.05, 0.1, 0.2, 0.4)):
            pairs = load_pairs(generate_dataset(4, 16, 16, (b, b), 11, tmp_path / str(i)))
            means.append(np.mean([h.mean() for h, _ in pairs]))
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_bad_args(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(0, 16, 16, (0, 1), 0, tmp_path)
        with pytest.raises(ValueError):
            generate_dataset(1, 16, 16, (1, 0.5), 0, tmp_path)
