import numpy as np
import pytest

from mrreg.datagen import SynthConfig, generate
from mrreg.demons import DemonsConfig, compose, demons_force, demons_register, exp_field, gaussian_smooth
from mrreg.losses import gncc
from mrreg.metrics import endpoint_error
from mrreg.regcore import nonpositive_jacobian_rate, warp


@pytest.fixture(scope="module")
def suite():
    return generate(SynthConfig(count=8, seed=3))


def test_force_vanishes_on_equal_images():
    t = np.random.default_rng(0).uniform(size=(16, 16))
    assert not demons_force(t, t).any()


def test_force_vanishes_on_flat_target():
    s = np.random.default_rng(1).uniform(size=(16, 16))
    f = demons_force(s, np.full((16, 16), 0.5))
    assert np.all(np.isfinite(f)) and not f.any()


def test_force_on_ramp_matches_hand_formula():
    x = np.arange(20.0)
    t = 0.1 * x
    s = t + 0.2  # equals t shifted by +2 px
    u = demons_force(s, t)
    assert u.shape == (1, 20)
    # 0.2 * 0.1 / (0.1**2 + 0.2**2)
    np.testing.assert_allclose(u[0], 0.4)
    # the applied update is -u, pulling samples back by the shift
    assert np.all(-u[0] < 0)


def test_force_matches_pointwise_formula():
    rng = np.random.default_rng(2)
    s, t = rng.uniform(size=(6, 7)), rng.uniform(size=(6, 7))
    u = demons_force(s, t)
    for i in range(1, 5):
        for j in range(1, 6):
            gy = (t[i + 1, j] - t[i - 1, j]) / 2
            gx = (t[i, j + 1] - t[i, j - 1]) / 2
            d = s[i, j] - t[i, j]
            den = gy * gy + gx * gx + d * d
            np.testing.assert_allclose(u[:, i, j], [d * gy / den, d * gx / den], rtol=1e-12)


def test_smooth_zero_sigma_and_constant():
    f = np.random.default_rng(3).normal(size=(2, 9, 9))
    np.testing.assert_array_equal(gaussian_smooth(f, 0), f)
    c = np.stack([np.full((9, 9), 1.5), np.full((9, 9), -2.0)])
    np.testing.assert_allclose(gaussian_smooth(c, 2.3), c, atol=1e-12)


def test_smooth_delta_matches_dense_convolution():
    f = np.zeros((2, 15, 15))
    f[0, 7, 7] = 1.0
    f[1, 5, 9] = -2.0
    r = np.arange(-3, 4)
    k = np.exp(-(r**2) / 2.0)
    k /= k.sum()
    want = np.zeros_like(f)
    for c, (ci, cj) in enumerate([(7, 7), (5, 9)]):
        amp = f[c, ci, cj]
        for a, da in enumerate(r):
            for b, db in enumerate(r):
                want[c, ci + da, cj + db] += amp * k[a] * k[b]
    np.testing.assert_allclose(gaussian_smooth(f, 1.0), want, atol=1e-6)


def test_exp_of_zero_and_small_velocity():
    assert not exp_field(np.zeros((2, 8, 8))).any()
    # for a constant velocity the exponential is the same constant shift
    v = np.stack([np.full((8, 8), 0.3), np.full((8, 8), -0.2)])
    np.testing.assert_allclose(exp_field(v), v, atol=1e-12)
    np.testing.assert_allclose(compose(v, v), 2 * v, atol=1e-12)


def test_identical_inputs_give_zero_field():
    t = generate(SynthConfig(count=1, amplitude=0.0)).items[0].image
    res = demons_register(t, t)
    assert np.abs(res.field).max() <= 1e-3
    assert res.metrics["method"] == "demons-lite"


def test_config_validation():
    with pytest.raises(ValueError):
        DemonsConfig(iterations=0)
    with pytest.raises(ValueError):
        DemonsConfig(fluid_sigma=-1)


def test_translation_recovery():
    ds = generate(SynthConfig(count=1, amplitude=0.0, seed=0))
    t = ds.template
    true = np.zeros((2, 64, 64))
    true[0] = 3.0
    s = warp(t, -true)  # s(p) = t(p - 3 e0)
    res = demons_register(s, t)
    assert endpoint_error(res.field, true) < 0.5
    assert nonpositive_jacobian_rate(res.field) == 0.0


def test_synthetic_pairs_improve_without_folding(suite):
    before, after, increases, steps = [], [], 0, 0
    for i in range(0, 8, 2):
        s, t = suite[i], suite[i + 1]
        res = demons_register(s.image, t.image, source_mask=s.mask)
        before.append(gncc(s.image, t.image))
        after.append(gncc(res.warped, t.image))
        assert nonpositive_jacobian_rate(res.field) == 0.0
        assert res.warped_mask.shape == s.mask.shape
        mse = np.diff(res.metrics["mse"])
        increases += int((mse > 0).sum())
        steps += mse.size
    assert all(a > b for a, b in zip(after, before))
    assert increases <= 0.05 * max(steps, 1)


def test_additive_update_mode_runs(suite):
    s, t = suite[0], suite[1]
    res = demons_register(s.image, t.image, DemonsConfig(diffeomorphic=False, iterations=10))
    assert gncc(res.warped, t.image) > gncc(s.image, t.image)
