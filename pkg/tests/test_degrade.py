import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dparnet.core import DegradationKind, ParamMap, Sequence, SmoothFieldSpec
from dparnet.data import synthetic_sequence
from dparnet.degrade import (
    DegradationSpec,
    apply_noise,
    apply_turbulence,
    degrade,
    gen_displacement,
    gen_param_map,
    variant_blur,
    warp_frame,
)

KINDS = list(DegradationKind)


def const_map(value, kind, shape=(64, 64)):
    return ParamMap(np.full(shape, value, np.float32), kind)


@pytest.fixture
def clean():
    return Sequence(synthetic_sequence(np.random.default_rng(4), 4, 64, 64, 1), id="c")


class TestParamMaps:
    def test_noise_ceiling(self):
        pm = gen_param_map(DegradationSpec("noise", SmoothFieldSpec(min_frac=1, max_frac=1)), 16, 16)
        assert np.all(pm.phys == 100.0)

    def test_turbulence_zero(self):
        pm = gen_param_map(DegradationSpec("turbulence", SmoothFieldSpec(min_frac=0, max_frac=0)), 16, 16)
        assert np.all(pm.values == 0)

    def test_deterministic(self):
        spec = DegradationSpec("turbulence", SmoothFieldSpec(seed=12))
        assert np.array_equal(gen_param_map(spec, 32, 32).values, gen_param_map(spec, 32, 32).values)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DegradationSpec("noise", max_disp=-1)
        with pytest.raises(ValueError):
            DegradationSpec("noise", warp_scale=0)
        with pytest.raises(ValueError):
            DegradationSpec("fog")

    def test_with_field(self):
        spec = DegradationSpec("noise", SmoothFieldSpec(8, 0.1, 0.2, 3), seed=5)
        new = spec.with_field(seed=9)
        assert new.field.seed == 9 and new.field.length_scale == 8 and new.seed == 5


class TestNoise:
    def test_identity_at_zero(self, clean):
        assert np.array_equal(apply_noise(clean, const_map(0, "noise"), 3).frames, clean.frames)

    def test_calibration(self):
        clean = Sequence(np.full((2, 256, 256), 0.5, np.float32))
        noisy = apply_noise(clean, const_map(0.51, "noise", (256, 256)), seed=8)
        assert abs(np.std(noisy.frames - clean.frames) - 0.2) / 0.2 < 0.05

    def test_deterministic_and_seeded(self, clean):
        pm = const_map(0.3, "noise")
        a, b = apply_noise(clean, pm, 1), apply_noise(clean, pm, 1)
        assert np.array_equal(a.frames, b.frames)
        assert not np.array_equal(a.frames, apply_noise(clean, pm, 2).frames)
        assert not np.array_equal(a.frames[0] - clean.frames[0], a.frames[1] - clean.frames[1])

    def test_clipped(self, clean):
        out = apply_noise(clean, const_map(1.0, "noise"), 1)
        assert out.frames.min() >= 0 and out.frames.max() <= 1

    def test_kind_and_shape_checked(self, clean):
        with pytest.raises(ValueError):
            apply_noise(clean, const_map(0.1, "turbulence"), 1)
        with pytest.raises(ValueError):
            apply_noise(clean, const_map(0.1, "noise", (32, 32)), 1)


class TestTurbulence:
    def test_zero_displacement(self):
        dx, dy = gen_displacement(const_map(0, "turbulence"), DegradationSpec("turbulence"), 0)
        assert np.all(dx == 0) and np.all(dy == 0)

    def test_displacement_bound_attained(self):
        pm = const_map(1.0, "turbulence")
        peaks = []
        for seed in range(100):
            dx, dy = gen_displacement(pm, DegradationSpec("turbulence", seed=seed, max_disp=4.0), 0)
            assert np.abs(dx).max() <= 4.0 + 1e-9 and np.abs(dy).max() <= 4.0 + 1e-9
            peaks.append(max(np.abs(dx).max(), np.abs(dy).max()))
        assert max(peaks) >= 3.6

    def test_frames_differ(self):
        pm = const_map(1.0, "turbulence")
        spec = DegradationSpec("turbulence", seed=3)
        assert not np.array_equal(gen_displacement(pm, spec, 0)[0], gen_displacement(pm, spec, 1)[0])

    def test_identity_at_zero(self, clean):
        out = apply_turbulence(clean, const_map(0, "turbulence"), DegradationSpec("turbulence", seed=1))
        assert np.array_equal(out.frames, clean.frames)

    def test_monotone(self, clean):
        spec = DegradationSpec("turbulence", seed=2)
        diffs = [np.abs(apply_turbulence(clean, const_map(v, "turbulence"), spec).frames - clean.frames).mean()
                 for v in (0.25, 0.5, 1.0)]
        assert diffs[0] <= diffs[1] <= diffs[2]

    def test_impulse_second_moment(self):
        frame = np.zeros((41, 41, 1))
        frame[20, 20] = 1.0
        out = variant_blur(frame, np.ones((41, 41)), 2.0)[..., 0]
        yy, xx = np.mgrid[0:41, 0:41] - 20
        var = (out * (yy ** 2 + xx ** 2)).sum() / out.sum() / 2
        assert abs(var - 4.0) / 4.0 < 0.1

    def test_warp_integer_shift(self, rng):
        frame = rng.random((16, 16, 1))
        out = warp_frame(frame, np.ones((16, 16)), np.zeros((16, 16)))
        assert np.allclose(out[:, :-1], frame[:, 1:])
        assert np.allclose(out[:, -1], frame[:, -1])  # clamped at the edge

    @given(seed=st.integers(0, 10_000), level=st.floats(0.05, 1.0))
    @settings(max_examples=15, deadline=None)
    def test_energy_bound(self, seed, level):
        frame = np.random.default_rng(seed).random((32, 32, 1))
        pm = const_map(level, "turbulence", (32, 32))
        dx, dy = gen_displacement(pm, DegradationSpec("turbulence", seed=seed), 0)
        out = warp_frame(frame, dx, dy)
        assert out.min() >= frame.min() - 1e-12 and out.max() <= frame.max() + 1e-12


class TestDispatch:
    @pytest.mark.parametrize("kind", KINDS)
    def test_spatial_adaptivity(self, clean, kind):
        values = np.zeros((64, 64), np.float32)
        values[:, 32:] = 1.0
        out = degrade(clean, ParamMap(values, kind), DegradationSpec(kind, seed=4))
        err = np.abs(out.frames - clean.frames)
        # leave a margin for the warp and blur support near the boundary
        assert err[:, :, 40:].mean() > err[:, :, :24].mean()

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, clean, kind):
        spec = DegradationSpec(kind, SmoothFieldSpec(seed=2), seed=7)
        pm = gen_param_map(spec, 64, 64)
        assert np.array_equal(degrade(clean, pm, spec).frames, degrade(clean, pm, spec).frames)

    def test_rgb(self):
        clean = Sequence(synthetic_sequence(np.random.default_rng(1), 2, 64, 64, 3))
        out = degrade(clean, const_map(0.5, "turbulence"), DegradationSpec("turbulence"))
        assert out.shape == clean.shape
