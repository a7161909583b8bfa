"""Multiplicative Rayleigh speckle at a target PSNR.

Random numbers come from splitmix64 so the stream can be reproduced in any
language: with ``state = seed`` and ``GAMMA = 0x9E3779B97F4A7C15``, output k
(k = 1, 2, ...) is ``mix(seed + k * GAMMA mod 2**64)`` where::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms are ``(z >> 11) * 2**-53`` in [0, 1) and Rayleigh(sigma) draws are
``sigma * sqrt(-2 ln(1 - u))``. For seed 0 the first outputs are
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.

The speckle field is ``M = 1 + R - E[R]`` with ``E[R] = sigma * sqrt(pi / 2)``:
mean one, so brightness is preserved in expectation, and its spread grows
linearly with sigma.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DimensionError

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
CALIBRATION_SEED = 0x5EED_CA11
SIGMA_RANGE = (1e-6, 10.0)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the splitmix64 stream for ``seed``."""
    k = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + k * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int) -> np.ndarray:
    return (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def rayleigh(sigma: float, shape, seed: int) -> np.ndarray:
    n = int(np.prod(shape))
    return (sigma * np.sqrt(-2.0 * np.log1p(-uniforms(seed, n)))).reshape(shape)


def rayleigh_mean(sigma: float) -> float:
    return sigma * math.sqrt(math.pi / 2.0)


def speckle_field(sigma: float, shape, seed: int) -> np.ndarray:
    """Mean-one multiplicative field ``1 + R - E[R]``."""
    return 1.0 + rayleigh(sigma, shape, seed) - rayleigh_mean(sigma)


def psnr(reference, test, peak: float | None = None) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; ``math.inf`` for identical images.

    ``peak`` defaults to 255 for 8-bit rasters and to the reference maximum
    otherwise.
    """
    ref = np.asarray(reference)
    tst = np.asarray(test)
    if ref.shape != tst.shape:
        raise DimensionError(f"psnr: shape mismatch {ref.shape} vs {tst.shape}")
    if peak is None:
        peak = 255.0 if ref.dtype == np.uint8 else float(ref.max())
    mse = float(np.mean((ref.astype(np.float64) - tst.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class NoiseConfig:
    target_psnr_db: float | None = None
    sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.target_psnr_db is None) == (self.sigma is None):
            raise ValueError("specify exactly one of target_psnr_db and sigma")
        if self.target_psnr_db is not None and not self.target_psnr_db > 0:
            raise ValueError(f"target PSNR must be > 0 dB, got {self.target_psnr_db}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def apply_speckle(image, sigma: float, seed: int) -> np.ndarray:
    """Multiply by the speckle field and clip to the raster's valid range.

    8-bit input is rounded back to uint8; real rasters are clipped to
    ``[0, max(image)]``.
    """
    img = np.asarray(image)
    if np.any(img < 0):
        raise ValueError("speckle corruption needs a nonnegative image")
    out = img.astype(np.float64) * speckle_field(sigma, img.shape, seed)
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return np.clip(out, 0.0, float(img.max()))


def calibrate_sigma(image, target_psnr_db: float, tol_db: float = 0.1, max_iter: int = 60) -> float:
    """Bisect sigma (geometrically) so the calibration-seed draw hits the target PSNR."""
    lo, hi = SIGMA_RANGE

    def measure(s: float) -> float:
        return psnr(image, apply_speckle(image, s, CALIBRATION_SEED))

    if measure(lo) < target_psnr_db:
        raise CalibrationError(f"target {target_psnr_db} dB unreachable: even sigma={lo} gives less")
    if measure(hi) > target_psnr_db:
        raise CalibrationError(f"target {target_psnr_db} dB unreachable: sigma={hi} still exceeds it")
    best, best_err = lo, math.inf
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        p = measure(mid)
        err = abs(p - target_psnr_db)
        if err < best_err:
            best, best_err = mid, err
        if err <= tol_db:
            return mid
        if p > target_psnr_db:
            lo = mid
        else:
            hi = mid
    if best_err > 0.5:
        raise CalibrationError(
            f"could not calibrate to {target_psnr_db} dB (closest {best_err:.2f} dB away); "
            "quantized rasters cannot reach arbitrarily high PSNR")
    return best


def corrupt_rayleigh(image, config: NoiseConfig) -> tuple[np.ndarray, float, float]:
    """Return ``(corrupted, achieved_psnr_db, sigma)``."""
    img = np.asarray(image)
    sigma = config.sigma
    if sigma is None:
        sigma = calibrate_sigma(img, config.target_psnr_db)
    out = apply_speckle(img, sigma, config.seed)
    achieved = psnr(img, out)
    if config.target_psnr_db is not None and not abs(achieved - config.target_psnr_db) <= 0.5:
        raise CalibrationError(
            f"achieved {achieved:.2f} dB with seed {config.seed}, outside +/-0.5 dB of {config.target_psnr_db}")
    return out, achieved, sigma
