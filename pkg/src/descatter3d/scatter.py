"""Forward emission-scattering model for temporal focusing measurements.

Each z-plane of a clean volume is convolved with a depth-dependent scattering
PSF (a narrow ballistic Gaussian plus a widening scattered halo, mixed by a
Beer-Lambert ballistic fraction) and then corrupted by Poisson shot noise.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy.special import gammaln

from .errors import InvalidRate, KernelTooLarge
from .volume import Volume

FFT_RADIUS_THRESHOLD = 8
DEFAULT_MAX_RADIUS = 256


@dataclass(frozen=True)
class ScatterParams:
    ell_s: float = 50.0
    sigma_b: float = 0.3
    sigma_s0: float = 2.0
    k_s: float = 0.15
    truncation: float = 4.0
    max_radius: int = DEFAULT_MAX_RADIUS

    def __post_init__(self):
        if self.ell_s <= 0:
            raise ValueError("ell_s must be > 0")
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be > 0")
        if self.sigma_s0 < self.sigma_b:
            raise ValueError("sigma_s0 must be >= sigma_b")
        if self.k_s < 0:
            raise ValueError("k_s must be >= 0")
        if self.truncation < 3:
            raise ValueError("truncation must be >= 3")

    def ballistic_weight(self, z: float) -> float:
        return math.exp(-z / self.ell_s)

    def halo_sigma(self, z: float) -> float:
        return self.sigma_s0 + self.k_s * z


@dataclass(frozen=True)
class NoiseParams:
    gain: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be > 0")


@dataclass(frozen=True, eq=False)
class Kernel2D:
    """Square tap array of side 2*radius+1, unit sum.

    ``norm`` is the sum of the raw (pre-normalization) samples, so
    ``weights * norm`` recovers the direct formula evaluation.
    """

    weights: np.ndarray
    pitch: float = 1.0
    norm: float = 1.0

    @property
    def radius(self) -> int:
        return (self.weights.shape[0] - 1) // 2

    @classmethod
    def delta(cls, pitch: float = 1.0) -> "Kernel2D":
        return cls(np.ones((1, 1)), pitch, 1.0)


def _gauss2d(r2: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-r2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def build_spsf(z_depth: float, params: ScatterParams, pitch_xy: float) -> Kernel2D:
    """Discretize the two-component scattering PSF at depth ``z_depth`` (um)."""
    if z_depth < 0:
        raise ValueError("z_depth must be >= 0")
    if pitch_xy <= 0:
        raise ValueError("pitch_xy must be > 0")
    w_b = params.ballistic_weight(z_depth)
    sigma_s = params.halo_sigma(z_depth)
    cutoff = params.truncation * sigma_s
    radius = int(math.ceil(cutoff / pitch_xy))
    if radius > params.max_radius:
        raise KernelTooLarge(
            f"sPSF radius {radius} voxels at depth {z_depth} um exceeds the maximum {params.max_radius}"
        )
    offs = np.arange(-radius, radius + 1, dtype=np.float64) * pitch_xy
    r2 = offs[:, None] ** 2 + offs[None, :] ** 2
    raw = w_b * _gauss2d(r2, params.sigma_b) + (1.0 - w_b) * _gauss2d(r2, sigma_s)
    raw[r2 > cutoff * cutoff] = 0.0
    # symmetrize explicitly so w(i, j) == w(-i, -j) holds bit-exactly
    raw = 0.5 * (raw + raw[::-1, ::-1])
    norm = float(raw.sum())
    return Kernel2D(raw / norm, pitch_xy, norm)


def _convolve_direct(plane: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = (w.shape[0] - 1) // 2
    nx, ny = plane.shape
    padded = np.zeros((nx + 2 * r, ny + 2 * r), dtype=np.float64)
    padded[r:r + nx, r:r + ny] = plane
    out = np.zeros((nx, ny), dtype=np.float64)
    for a, b in zip(*np.nonzero(w)):
        # out[i, j] += w[a, b] * plane[i - (a - r), j - (b - r)]
        out += w[a, b] * padded[2 * r - a:2 * r - a + nx, 2 * r - b:2 * r - b + ny]
    return out


def _convolve_fft(plane: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = (w.shape[0] - 1) // 2
    nx, ny = plane.shape
    shape = (sfft.next_fast_len(nx + 2 * r, real=True), sfft.next_fast_len(ny + 2 * r, real=True))
    f = sfft.rfft2(plane, shape) * sfft.rfft2(w, shape)
    full = sfft.irfft2(f, shape)
    return full[r:r + nx, r:r + ny]


def convolve_plane(plane: np.ndarray, kernel: Kernel2D, backend: str = "auto") -> np.ndarray:
    """Zero-padded linear convolution, output cropped to the input size (float64)."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or min(plane.shape) < 1:
        raise ValueError("plane must be a non-empty 2D array")
    if backend == "auto":
        backend = "fft" if kernel.radius > FFT_RADIUS_THRESHOLD else "direct"
    if backend == "direct":
        return _convolve_direct(plane, kernel.weights)
    if backend == "fft":
        return _convolve_fft(plane, kernel.weights)
    raise ValueError(f"unknown backend {backend!r}")


# --- Poisson sampling -------------------------------------------------------

PTRS_THRESHOLD = 30.0


def _knuth(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    limit = np.exp(-lam)
    k = np.zeros(lam.shape, dtype=np.int64)
    prod = np.ones(lam.shape, dtype=np.float64)
    active = np.arange(lam.size)
    while active.size:
        prod[active] *= rng.random(active.size)
        still = prod[active] > limit[active]
        k[active[still]] += 1
        active = active[still]
    return k


def _ptrs(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Hormann's transformed rejection with squeeze
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    k = np.zeros(lam.shape, dtype=np.int64)
    active = np.arange(lam.size)
    while active.size:
        n = active.size
        u = rng.random(n) - 0.5
        v = rng.random(n)
        aa, bb, ll = a[active], b[active], lam[active]
        us = 0.5 - np.abs(u)
        kk = np.floor((2.0 * aa / us + bb) * u + ll + 0.43)
        quick = (us >= 0.07) & (v <= vr[active])
        reject = (kk < 0) | ((us < 0.013) & (v > us))
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(v) + np.log(invalpha[active]) - np.log(aa / (us * us) + bb)
            rhs = -ll + kk * loglam[active] - gammaln(kk + 1.0)
        accept = quick | (~reject & (lhs <= rhs))
        k[active[accept]] = kk[accept].astype(np.int64)
        active = active[~accept]
    return k


def poisson_sample_array(lam, rng: np.random.Generator) -> np.ndarray:
    """Elementwise Poisson draws: Knuth below lambda=30, PTRS at and above."""
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise InvalidRate("Poisson rates must be finite and >= 0")
    flat = lam.ravel()
    out = np.zeros(flat.shape, dtype=np.int64)
    small = np.flatnonzero((flat > 0) & (flat < PTRS_THRESHOLD))
    large = np.flatnonzero(flat >= PTRS_THRESHOLD)
    if small.size:
        out[small] = _knuth(flat[small], rng)
    if large.size:
        out[large] = _ptrs(flat[large], rng)
    return out.reshape(lam.shape)


def poisson_sample(lam: float, rng: np.random.Generator) -> int:
    if not math.isfinite(lam) or lam < 0:
        raise InvalidRate(f"invalid Poisson rate {lam}")
    return int(poisson_sample_array(np.array([lam]), rng)[0])


def plane_rng(seed: int, plane: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, plane index)."""
    return np.random.Generator(np.random.Philox(key=(int(plane) << 64) | (int(seed) & (2**64 - 1))))


# --- full forward model -----------------------------------------------------

def _blur_plane(truth: Volume, k: int, params: ScatterParams, backend: str) -> np.ndarray:
    kernel = build_spsf(truth.plane_depth(k), params, truth.pitch[0])
    return convolve_plane(truth.data[:, :, k], kernel, backend)


def _map_planes(fn, nz: int, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(nz)))
    return [fn(k) for k in range(nz)]


def noiseless_forward(truth: Volume, params: ScatterParams, backend: str = "auto", threads: int = 1) -> np.ndarray:
    """Per-plane sPSF convolution without noise, float64 (nx, ny, nz)."""
    if truth.pitch[0] != truth.pitch[1]:
        raise ValueError("lateral pitch must be isotropic")
    planes = _map_planes(lambda k: _blur_plane(truth, k, params, backend), truth.dims[2], threads)
    return np.stack(planes, axis=2)


def apply_forward_model(
    truth: Volume,
    params: ScatterParams,
    noise: NoiseParams,
    backend: str = "auto",
    threads: int = 1,
) -> Volume:
    """Simulate a scattered, shot-noise-limited measurement of ``truth``."""

    def one(k: int) -> np.ndarray:
        blurred = np.maximum(_blur_plane(truth, k, params, backend), 0.0)
        counts = poisson_sample_array(blurred * noise.gain, plane_rng(noise.seed, k))
        return counts / noise.gain

    planes = _map_planes(one, truth.dims[2], threads)
    return truth.with_data(np.stack(planes, axis=2).astype(np.float32))
