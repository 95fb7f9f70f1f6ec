"""Regularizers of the ROI iteration.

``mollify`` smooths projection data with a small compactly supported kernel
(projection space); ``wavelet_shrink`` hard-thresholds a periodic Daubechies-4
decomposition of a volume (image space).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .phantom import VoxelVolume
from .projector import ProjectionSet


# --------------------------------------------------------------------------
# mollifier


def bump(r: np.ndarray) -> np.ndarray:
    """Compact polynomial bump ``(1 - r^2)^2`` on ``r < 1``."""
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, (1.0 - r * r) ** 2, 0.0)


@dataclass(frozen=True)
class MollifierKernel:
    """Discrete kernel ``w(x N / base_radius)`` on the pixel grid, normalized to unit sum.

    The support radius in pixels is ``base_radius / scale``.  The defaults give
    a radius of 1.5 pixels, i.e. a kernel spanning three pixels.
    """

    scale: int = 2
    base_radius: float = 3.0

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("mollifier scale must be a positive integer")
        if not self.base_radius > 0:
            raise ValueError("base_radius must be positive")

    @property
    def radius(self) -> float:
        return self.base_radius / self.scale

    def weights(self) -> np.ndarray:
        half = max(int(math.ceil(self.radius)) - 1, 0)
        if half + 1 < self.radius:
            half += 1
        k = np.arange(-half, half + 1, dtype=float)
        r = np.hypot(k[:, None], k[None, :]) / self.radius
        w = bump(r)
        return w / w.sum()


def mollify(p: ProjectionSet, k: MollifierKernel) -> ProjectionSet:
    """Convolve every view with ``k`` (zero boundary, same grid)."""
    w = k.weights()
    if w.size == 1:
        return p.with_values(p.values.copy())
    out = np.empty_like(p.values)
    for i in range(p.values.shape[0]):
        out[i] = ndimage.convolve(p.values[i], w, mode="constant", cval=0.0)
    return ProjectionSet(out, p.geometry, None, p.roi, "full")


# --------------------------------------------------------------------------
# periodic Daubechies-4 (two vanishing moments) transform

_S3 = math.sqrt(3.0)
DB4_LO = np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * math.sqrt(2.0))
DB4_HI = np.array([DB4_LO[3], -DB4_LO[2], DB4_LO[1], -DB4_LO[0]])


def _analysis(x: np.ndarray, axis: int) -> np.ndarray:
    """One periodic analysis step along ``axis``; approx first, detail second."""
    m = x.shape[axis]
    idx = (2 * np.arange(m // 2)[:, None] + np.arange(4)[None, :]) % m
    x = np.moveaxis(x, axis, -1)
    taps = x[..., idx]  # [..., m/2, 4]
    a = taps @ DB4_LO
    d = taps @ DB4_HI
    return np.moveaxis(np.concatenate([a, d], axis=-1), -1, axis)


def _synthesis(c: np.ndarray, axis: int) -> np.ndarray:
    m = c.shape[axis]
    h = m // 2
    c = np.moveaxis(c, axis, -1)
    a, d = c[..., :h], c[..., h:]
    out = np.zeros(c.shape)
    for k in range(4):
        pos = (2 * np.arange(h) + k) % m
        np.add.at(out, (..., pos), a * DB4_LO[k] + d * DB4_HI[k])
    return np.moveaxis(out, -1, axis)


def max_levels(n: int) -> int:
    return max(int(math.log2(n)) - 2, 0)


def _check_levels(n: int, levels: int):
    if levels < 1:
        raise ValueError("need at least one decomposition level")
    if n % (2**levels):
        raise ValueError(f"grid side {n} is not divisible by 2**{levels}")


@dataclass
class WaveletCoeffs:
    """Mallat layout: level ``i`` (1 = finest) details fill ``[:2m]^3`` minus ``[:m]^3`` with ``m = n / 2**i``."""

    data: np.ndarray
    levels: int

    def detail_mask(self, level: int) -> np.ndarray:
        n = self.data.shape[0]
        m = n >> level
        sel = np.zeros(self.data.shape, dtype=bool)
        sel[: 2 * m, : 2 * m, : 2 * m] = True
        sel[:m, :m, :m] = False
        return sel

    def coarse(self) -> np.ndarray:
        m = self.data.shape[0] >> self.levels
        return self.data[:m, :m, :m]


def dwt3(v, levels: int) -> WaveletCoeffs:
    """Orthonormal separable 3D transform with periodic boundaries."""
    x = np.array(v.values if isinstance(v, VoxelVolume) else v, dtype=float)
    n = x.shape[0]
    _check_levels(n, levels)
    m = n
    for _ in range(levels):
        sub = x[:m, :m, :m]
        for ax in range(3):
            sub = _analysis(sub, ax)
        x[:m, :m, :m] = sub
        m //= 2
    return WaveletCoeffs(x, levels)


def idwt3_array(c: WaveletCoeffs) -> np.ndarray:
    x = c.data.copy()
    n = x.shape[0]
    for lev in range(c.levels, 0, -1):
        m = n >> (lev - 1)
        sub = x[:m, :m, :m]
        for ax in (2, 1, 0):
            sub = _synthesis(sub, ax)
        x[:m, :m, :m] = sub
    return x


def idwt3(c: WaveletCoeffs, like: VoxelVolume) -> VoxelVolume:
    return like.with_values(idwt3_array(c))


@dataclass(frozen=True)
class WaveletConfig:
    """Daub4 shrinkage: keep the largest ``keep_fraction`` of details per scale.

    ``mode`` is ``"hard"`` or ``"smooth"`` (a continuous ramp from half the
    threshold up to the threshold instead of a jump).
    """

    levels: int = 3
    keep_fraction: float = 0.1
    mode: str = "hard"
    family: str = "daub4"

    def __post_init__(self):
        if self.family.lower() not in ("daub4", "db2"):
            raise ValueError("only the Daubechies-4 family is available")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.mode not in ("hard", "smooth"):
            raise ValueError("mode must be 'hard' or 'smooth'")

    def validate_for(self, n: int):
        if self.levels > max_levels(n):
            raise ValueError(f"{self.levels} levels exceed log2({n}) - 2")
        _check_levels(n, self.levels)


def scale_thresholds(c: WaveletCoeffs, keep_fraction: float) -> list[float]:
    """Per-scale ``(1 - keep_fraction)`` quantile of detail magnitudes (finest first)."""
    out = []
    for lev in range(1, c.levels + 1):
        mag = np.abs(c.data[c.detail_mask(lev)])
        out.append(float(np.quantile(mag, 1.0 - keep_fraction)) if keep_fraction < 1 else 0.0)
    return out


def shrink_coeffs(c: WaveletCoeffs, thresholds, mode: str = "hard") -> WaveletCoeffs:
    d = c.data.copy()
    for lev, thr in enumerate(thresholds, start=1):
        if thr <= 0:
            continue
        sel = c.detail_mask(lev)
        a = d[sel]
        if mode == "hard":
            a = np.where(np.abs(a) < thr, 0.0, a)
        else:
            ramp = np.clip((np.abs(a) - 0.5 * thr) / (0.5 * thr), 0.0, 1.0)
            a = a * ramp * ramp * (3 - 2 * ramp)
        d[sel] = a
    return WaveletCoeffs(d, c.levels)


def wavelet_shrink(v: VoxelVolume, cfg: WaveletConfig = WaveletConfig(), thresholds=None) -> VoxelVolume:
    """Threshold details at every scale; the coarse approximation passes unchanged."""
    cfg.validate_for(v.n)
    c = dwt3(v, cfg.levels)
    if thresholds is None:
        thresholds = scale_thresholds(c, cfg.keep_fraction)
    return idwt3(shrink_coeffs(c, thresholds, cfg.mode), v)
