import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sonatr import noise, synthgen as sg
from sonatr.errors import CalibrationError, DimensionError

MASK = (1 << 64) - 1


def splitmix_reference(seed, n):
    """Stateful textbook splitmix64 using Python integers."""
    state = seed & MASK
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_published_vectors():
    got = [int(v) for v in noise.splitmix64(0, 3)]
    assert got == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@settings(max_examples=30)
@given(st.integers(0, 2**64 - 1))
def test_splitmix_matches_reference(seed):
    assert [int(v) for v in noise.splitmix64(seed, 20)] == splitmix_reference(seed, 20)


def test_uniforms_in_unit_interval():
    u = noise.uniforms(7, 100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_rayleigh_inverse_cdf():
    u = noise.uniforms(3, 5)
    expected = [2.0 * math.sqrt(-2.0 * math.log(1.0 - float(v))) for v in u]
    np.testing.assert_allclose(noise.rayleigh(2.0, (5,), 3), expected, rtol=1e-14)


def test_monte_carlo_mean_of_speckle():
    for sigma in (0.1, 0.5, 2.0):
        r = noise.rayleigh(sigma, (10**6,), 11)
        assert 0.998 <= r.mean() / noise.rayleigh_mean(sigma) <= 1.002
        assert 0.998 <= noise.speckle_field(sigma, (10**6,), 11).mean() <= 1.002


def test_psnr_identical_is_infinite():
    img = np.random.default_rng(0).random((8, 8))
    assert noise.psnr(img, img) == math.inf


def test_psnr_off_by_one_uint8():
    a = np.full((10, 10), 100, dtype=np.uint8)
    b = np.full((10, 10), 101, dtype=np.uint8)
    assert noise.psnr(a, b) == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert noise.psnr(a, b) == pytest.approx(48.13, abs=0.005)


def test_psnr_halving_mse_adds_3db():
    ref = np.ones((4, 4))
    a = noise.psnr(ref, ref + 0.1)
    b = noise.psnr(ref, ref + 0.1 / math.sqrt(2))
    assert b - a == pytest.approx(10 * math.log10(2), abs=1e-9)


def test_psnr_float_peak_is_reference_max():
    ref = np.array([[0.0, 2.0]])
    assert noise.psnr(ref, ref + 0.5) == pytest.approx(10 * math.log10(4 / 0.25))
    with pytest.raises(DimensionError):
        noise.psnr(ref, np.zeros((2, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        noise.NoiseConfig()
    with pytest.raises(ValueError):
        noise.NoiseConfig(target_psnr_db=30, sigma=0.1)
    with pytest.raises(ValueError):
        noise.NoiseConfig(target_psnr_db=0.0)
    with pytest.raises(ValueError):
        noise.NoiseConfig(sigma=-1.0)


@pytest.fixture(scope="module")
def scene():
    return sg.generate_scene(sg.standard_scene_spec())[0]


@pytest.mark.parametrize("target", [35.0, 25.0])
def test_calibration_hits_target_on_standard_scene(scene, target):
    out, achieved, sigma = noise.corrupt_rayleigh(scene, noise.NoiseConfig(target_psnr_db=target, seed=1))
    assert abs(achieved - target) <= 0.5
    assert achieved == pytest.approx(noise.psnr(scene, out))
    assert 1e-6 <= sigma <= 10


def test_psnr_decreases_with_sigma(scene):
    values = [noise.psnr(scene, noise.apply_speckle(scene, s, 5)) for s in np.geomspace(1e-4, 3, 25)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_vanishing_noise_on_float_raster(scene):
    out, _, _ = noise.corrupt_rayleigh(scene, noise.NoiseConfig(target_psnr_db=80.0, seed=2))
    assert np.max(np.abs(out - scene)) <= 1e-2 * np.max(np.abs(scene))


def test_unreachable_target_on_uint8():
    img = (np.random.default_rng(1).random((32, 32)) * 200 + 20).astype(np.uint8)
    with pytest.raises(CalibrationError):
        noise.corrupt_rayleigh(img, noise.NoiseConfig(target_psnr_db=90.0))


def test_deterministic_and_clipped(scene):
    cfg = noise.NoiseConfig(sigma=0.8, seed=9)
    a = noise.corrupt_rayleigh(scene, cfg)[0]
    b = noise.corrupt_rayleigh(scene, cfg)[0]
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= scene.max()
    c = noise.corrupt_rayleigh(scene, noise.NoiseConfig(sigma=0.8, seed=10))[0]
    assert a.tobytes() != c.tobytes()
    img8 = (scene * 255).astype(np.uint8)
    out8 = noise.apply_speckle(img8, 2.0, 1)
    assert out8.dtype == np.uint8


def test_negative_image_rejected():
    with pytest.raises(ValueError):
        noise.apply_speckle(np.array([[-1.0, 1.0]]), 0.1, 0)
