"""Inverse operators ``Z`` for untruncated data.

* :func:`fourier_slice_inverse` grids parallel-ray spectra onto a Cartesian
  frequency grid (Fourier slice theorem) and inverts with a 3D FFT.
* :func:`fdk` is the usual circular-orbit filtered backprojection.
* :func:`grangeat_inverse` goes through the first radial derivative of the
  3D Radon transform for Tuy-complete source curves.
* :func:`spherical_inverse` rebins spherical-source data to parallel lines.

All outputs are restricted to the target ball.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import finufft
import numba
import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import Ball, SourceGeometry
from .phantom import VoxelVolume
from .projector import Geometry, ParallelGrid, ProjectionSet

INVERSE_KINDS = ("fourier_slice", "fdk", "grangeat", "spherical_rebin")

_COMPATIBLE = {
    "fourier_slice": ("parallel",),
    "fdk": ("circle",),
    "grangeat": ("circle", "twin_circles", "helix"),
    "spherical_rebin": ("sphere",),
}


class CoverageError(ValueError):
    """Frequency or ray coverage is insufficient for the requested inversion."""


class TuyError(ValueError):
    """Some planes through the target ball meet the source curve nowhere transversally."""


@dataclass(frozen=True)
class VolumeGrid:
    n: int
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def inscribing(cls, ball: Ball, n: int) -> "VolumeGrid":
        """Cube of side ``n`` whose inscribed ball is ``ball``."""
        return cls(n, 2.0 * ball.radius / n, tuple(float(c) for c in ball.center))

    def ball(self) -> Ball:
        return Ball(self.origin, 0.5 * self.n * self.voxel_size)

    def zeros(self) -> VoxelVolume:
        return VoxelVolume.zeros(self.n, self.voxel_size, self.origin)

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - (self.n - 1) / 2.0) * self.voxel_size

    def to_dict(self) -> dict:
        return {"n": self.n, "voxel_size": self.voxel_size, "origin": list(self.origin)}


def _geom_kind(g: Geometry) -> str:
    return "parallel" if isinstance(g, ParallelGrid) else g.kind


# --------------------------------------------------------------------------
# Fourier slice gridding


@dataclass
class _SliceAssignment:
    freqs: np.ndarray       # [K, 3] frequencies kept (cycles per unit)
    flat: np.ndarray        # [K] flat index into the n^3 FFT grid
    apod: np.ndarray        # [K] taper near the Nyquist shell
    order: np.ndarray       # frequency slots sorted by direction
    bounds: np.ndarray      # [D + 1] slice of ``order`` per direction
    slot_weight: np.ndarray  # [2K] inverse-distance weights (slot s -> freq s % K)
    worst: float            # largest best-orthogonality residual


_ASSIGN_CACHE: dict = {}


def _nyquist_taper(kr: np.ndarray, cutoff: float) -> np.ndarray:
    """1 below ``cutoff``, raised cosine down to 0 at the Nyquist radius (``kr`` in units of Nyquist)."""
    if cutoff >= 1.0:
        return (kr <= 1.0).astype(float)
    x = np.clip((kr - cutoff) / (1.0 - cutoff), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * x))


def _assign(dirs: np.ndarray, grid: VolumeGrid, cutoff: float, coverage_tol: float) -> _SliceAssignment:
    key = (dirs.tobytes(), grid.n, grid.voxel_size, cutoff, coverage_tol)
    hit = _ASSIGN_CACHE.get(key)
    if hit is not None:
        return hit
    n, h = grid.n, grid.voxel_size
    k1 = np.fft.fftfreq(n, h)
    K = np.stack(np.meshgrid(k1, k1, k1, indexing="ij"), axis=-1).reshape(-1, 3)
    kr = np.linalg.norm(K, axis=1) * (2.0 * h)
    apod = _nyquist_taper(kr, cutoff)
    flat = np.flatnonzero(apod > 0)
    K, apod, kr = K[flat], apod[flat], kr[flat]
    D = len(dirs)
    best = np.empty((len(K), 2), dtype=np.int64)
    res = np.empty((len(K), 2))
    khat = K / np.maximum(np.linalg.norm(K, axis=1, keepdims=True), 1e-300)
    chunk = max(1, 4_000_000 // D)
    for s in range(0, len(K), chunk):
        r = np.abs(khat[s : s + chunk] @ dirs.T)
        r[kr[s : s + chunk] == 0] = 0.0
        two = np.argpartition(r, 1, axis=1)[:, :2] if D > 1 else np.zeros((len(r), 2), dtype=np.int64)
        rr = np.take_along_axis(r, two, axis=1)
        swap = rr[:, 0] > rr[:, 1]
        two[swap] = two[swap][:, ::-1]
        rr[swap] = rr[swap][:, ::-1]
        best[s : s + chunk], res[s : s + chunk] = two, rr
    worst = float(res[:, 0].max()) if len(res) else 0.0
    if worst > coverage_tol:
        bad = np.flatnonzero(res[:, 0] > coverage_tol)
        sample = ", ".join(f"({a:.4f}, {b:.4f}, {c:.4f})" for a, b, c in K[bad[:5]])
        raise CoverageError(
            f"{len(bad)} frequency cells have no slice within orthogonality residual {coverage_tol:.3g} "
            f"(worst {worst:.3g}); e.g. frequencies {sample}. Use more directions."
        )
    wgt = 1.0 / (res + 1e-12)
    wgt /= wgt.sum(axis=1, keepdims=True)
    if D == 1:
        wgt[:] = [1.0, 0.0]
    slots = best.T.ravel()  # slot s -> frequency s % K
    order = np.argsort(slots, kind="stable")
    bounds = np.searchsorted(slots[order], np.arange(D + 1))
    out = _SliceAssignment(K, flat, apod, order, bounds, wgt.T.ravel(), worst)
    if len(_ASSIGN_CACHE) > 8:
        _ASSIGN_CACHE.clear()
    _ASSIGN_CACHE[key] = out
    return out


def slice_spectrum(p: ProjectionSet, index: int, freqs: np.ndarray) -> np.ndarray:
    """2D Fourier transform of view ``index`` at 3D frequencies lying in ``theta^perp``.

    Uses ``F(k) = sum_{a,b} g(a,b) exp(-2 pi i k.(c + a e1 + b e2)) du^2``.
    """
    grid: ParallelGrid = p.geometry
    freqs = np.atleast_2d(np.asarray(freqs, dtype=float))
    nu, du = grid.nu, grid.du
    delta = (nu // 2 - (nu - 1) / 2.0) * du
    w2 = freqs @ grid.e2[index]  # rows
    w1 = freqs @ grid.e1[index]  # cols
    x = np.mod(-2 * np.pi * w2 * du + np.pi, 2 * np.pi) - np.pi
    y = np.mod(-2 * np.pi * w1 * du + np.pi, 2 * np.pi) - np.pi
    g = np.ascontiguousarray(p.values[index], dtype=np.complex128)
    s = finufft.nufft2d2(x, y, g, isign=1, eps=1e-12, modeord=0)
    phase = np.exp(-2j * np.pi * ((w1 + w2) * delta + freqs @ grid.ball.center)) * du * du
    return s * phase


def fourier_slice_inverse(
    p: ProjectionSet, grid: Optional[VolumeGrid] = None, cutoff: float = 0.9, coverage_tol: Optional[float] = None
) -> VoxelVolume:
    """Invert full parallel-line data by slice gridding and an inverse 3D FFT.

    Every frequency ``k`` of the output FFT grid takes the two sampled
    directions most nearly orthogonal to it and blends their 2D spectra with
    inverse-distance weights.  ``cutoff`` (fraction of Nyquist) starts a cosine
    taper to zero at the Nyquist sphere.
    """
    geom = p.geometry
    if not isinstance(geom, ParallelGrid):
        raise ValueError("fourier_slice_inverse needs parallel-ray data")
    grid = grid or VolumeGrid.inscribing(geom.ball, geom.nu)
    dirs = geom.directions
    if coverage_tol is None:
        coverage_tol = 2.0 * math.sqrt(2.0 * math.pi / len(dirs))
    a = _assign(dirs, grid, cutoff, coverage_tol)
    nK = len(a.freqs)
    F = np.zeros(nK, dtype=np.complex128)
    nu, du = geom.nu, geom.du
    delta = (nu // 2 - (nu - 1) / 2.0) * du
    c = geom.ball.center
    for i in range(len(dirs)):
        lo, hi = a.bounds[i], a.bounds[i + 1]
        if lo == hi:
            continue
        view = p.values[i]
        if not view.any():
            continue
        slots = a.order[lo:hi]
        idx = slots % nK
        k = a.freqs[idx]
        w2 = k @ geom.e2[i]
        w1 = k @ geom.e1[i]
        x = np.mod(-2 * np.pi * w2 * du + np.pi, 2 * np.pi) - np.pi
        y = np.mod(-2 * np.pi * w1 * du + np.pi, 2 * np.pi) - np.pi
        s = finufft.nufft2d2(x, y, np.ascontiguousarray(view, dtype=np.complex128), isign=1, eps=1e-10, modeord=0)
        phase = np.exp(-2j * np.pi * ((w1 + w2) * delta + k @ c))
        F[idx] += a.slot_weight[slots] * s * phase
    F *= du * du * a.apod
    n, h = grid.n, grid.voxel_size
    full = np.zeros(n**3, dtype=np.complex128)
    # shift from the continuous transform to the sampled voxel centres
    shift = np.asarray(grid.origin, dtype=float) - (n - 1) / 2.0 * h
    full[a.flat] = F * np.exp(2j * np.pi * (a.freqs @ shift))
    vol = np.fft.ifftn(full.reshape(n, n, n)).real / h**3
    return VoxelVolume(vol, h, grid.origin)


# --------------------------------------------------------------------------
# FDK


@numba.njit(cache=True)
def _fdk_backproject(Q, pos, w, eu, ev, R, du, dv, pts, out):
    S, rows, cols = Q.shape
    for k in range(pts.shape[0]):
        x0, x1, x2 = pts[k, 0], pts[k, 1], pts[k, 2]
        acc = 0.0
        for s in range(S):
            d0, d1, d2 = x0 - pos[s, 0], x1 - pos[s, 1], x2 - pos[s, 2]
            L = d0 * w[s, 0] + d1 * w[s, 1] + d2 * w[s, 2]
            pu = R * (d0 * eu[s, 0] + d1 * eu[s, 1] + d2 * eu[s, 2]) / L
            pv = R * (d0 * ev[s, 0] + d1 * ev[s, 1] + d2 * ev[s, 2]) / L
            fu = pu / du + (cols - 1) / 2.0
            fv = pv / dv + (rows - 1) / 2.0
            if fu < 0.0 or fv < 0.0 or fu > cols - 1 or fv > rows - 1:
                continue
            iu = min(int(fu), cols - 2)
            iv = min(int(fv), rows - 2)
            a, b = fu - iu, fv - iv
            val = (Q[s, iv, iu] * (1 - a) + Q[s, iv, iu + 1] * a) * (1 - b) + (Q[s, iv + 1, iu] * (1 - a) + Q[s, iv + 1, iu + 1] * a) * b
            acc += (R / L) ** 2 * val
        out[k] = acc


def ramp_filter(n: int, spacing: float, window: str = "ramlak", cutoff: float = 1.0) -> np.ndarray:
    """Frequency response (length ``2^ceil(log2 2n)``) of the band-limited ramp, times ``spacing``."""
    m = 1 << int(math.ceil(math.log2(2 * n)))
    k = np.arange(m)
    k = np.where(k > m // 2, k - m, k)
    h = np.zeros(m)
    h[0] = 1.0 / (4 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    H = np.real(np.fft.fft(h)) * spacing
    f = np.abs(np.fft.fftfreq(m))  # cycles per sample, Nyquist 0.5
    if window == "hamming":
        H *= 0.54 + 0.46 * np.cos(np.pi * f / 0.5)
    elif window != "ramlak":
        raise ValueError(f"unknown ramp window {window!r}")
    H[f > 0.5 * cutoff] = 0.0
    return H


def fdk(p: ProjectionSet, grid: VolumeGrid, window: str = "ramlak", cutoff: float = 1.0) -> VoxelVolume:
    """Feldkamp-Davis-Kress reconstruction from a full circular orbit."""
    geom = p.geometry
    if _geom_kind(geom) != "circle":
        raise ValueError(f"fdk needs circular-orbit data, got {_geom_kind(geom)!r}")
    B = geom.ball
    if np.linalg.norm(B.center) > 1e-9 * max(1.0, B.radius):
        raise ValueError("fdk assumes the target ball is centred on the orbit axis")
    det = geom.detector
    s = geom.samples
    R = geom.radius
    mag = R / det.sdd
    du = dv = det.spacing * mag
    u = det.u_coords * mag
    v = det.v_coords * mag
    cosw = R / np.sqrt(R * R + u[None, :] ** 2 + v[:, None] ** 2)
    H = ramp_filter(det.cols, du, window, cutoff)
    m = len(H)
    Q = np.fft.ifft(np.fft.fft(p.values * cosw[None], n=m, axis=2) * H, axis=2).real[:, :, : det.cols]
    vol = grid.zeros()
    inside = vol.support_mask()
    pts = vol.centers()[inside]
    acc = np.zeros(len(pts))
    _fdk_backproject(np.ascontiguousarray(Q), s.positions, s.w, s.e_u, s.e_v, R, du, dv, np.ascontiguousarray(pts), acc)
    out = np.zeros(vol.values.shape)
    out[inside] = acc * 0.5 * (2 * math.pi / len(s))
    return vol.with_values(out)


# --------------------------------------------------------------------------
# Grangeat


@numba.njit(cache=True, inline="always")
def _detector_G(vals, s, y0, y1, y2, w, eu, ev, sdd, u0, v0, du):
    """Homogeneous extension ``G(a, y) = g(a, y/|y|) / |y|`` by bilinear detector lookup."""
    yw = y0 * w[s, 0] + y1 * w[s, 1] + y2 * w[s, 2]
    if yw <= 0.0:
        return 0.0
    pu = sdd * (y0 * eu[s, 0] + y1 * eu[s, 1] + y2 * eu[s, 2]) / yw
    pv = sdd * (y0 * ev[s, 0] + y1 * ev[s, 1] + y2 * ev[s, 2]) / yw
    rows, cols = vals.shape[1], vals.shape[2]
    fu = (pu - u0) / du
    fv = (pv - v0) / du
    if fu < 0.0 or fv < 0.0 or fu > cols - 1 or fv > rows - 1:
        return 0.0
    iu = min(int(fu), cols - 2)
    iv = min(int(fv), rows - 2)
    a, b = fu - iu, fv - iv
    g = (vals[s, iv, iu] * (1 - a) + vals[s, iv, iu + 1] * a) * (1 - b) + (vals[s, iv + 1, iu] * (1 - a) + vals[s, iv + 1, iu + 1] * a) * b
    return g / math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)


@numba.njit(cache=True)
def _grangeat_P(vals, pos, w, eu, ev, sdd, u0, v0, du, center, rB, thetas, pb, qb, dphi, eps, out):
    """``P[s, j] = int_{alpha perp theta_j} theta_j . grad_y G(a_s, alpha) d alpha``."""
    S = pos.shape[0]
    T = thetas.shape[0]
    for s in range(S):
        c0, c1, c2 = center[0] - pos[s, 0], center[1] - pos[s, 1], center[2] - pos[s, 2]
        dist = math.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
        cosb = math.sqrt(max(dist * dist - rB * rB, 0.0)) / dist
        for j in range(T):
            th0, th1, th2 = thetas[j, 0], thetas[j, 1], thetas[j, 2]
            # alpha(phi) = cos(phi) p + sin(phi) q; its component along w
            ap = pb[j, 0] * w[s, 0] + pb[j, 1] * w[s, 1] + pb[j, 2] * w[s, 2]
            aq = qb[j, 0] * w[s, 0] + qb[j, 1] * w[s, 1] + qb[j, 2] * w[s, 2]
            A = math.sqrt(ap * ap + aq * aq)
            if A <= cosb:
                out[s, j] = 0.0
                continue
            phi0 = math.atan2(aq, ap)
            half = math.acos(min(cosb / A, 1.0))
            m = int(math.ceil(2 * half / dphi)) + 1
            h = 2 * half / (m - 1)
            acc = 0.0
            for k in range(m):
                phi = phi0 - half + k * h
                cp, sp = math.cos(phi), math.sin(phi)
                a0 = cp * pb[j, 0] + sp * qb[j, 0]
                a1 = cp * pb[j, 1] + sp * qb[j, 1]
                a2 = cp * pb[j, 2] + sp * qb[j, 2]
                gp = _detector_G(vals, s, a0 + eps * th0, a1 + eps * th1, a2 + eps * th2, w, eu, ev, sdd, u0, v0, du)
                gm = _detector_G(vals, s, a0 - eps * th0, a1 - eps * th1, a2 - eps * th2, w, eu, ev, sdd, u0, v0, du)
                wt = 0.5 if (k == 0 or k == m - 1) else 1.0
                acc += wt * (gp - gm)
            out[s, j] = acc * h / (2 * eps)


@numba.njit(cache=True)
def _rebin_planes(sv, kv, mv, closed, s_levels, tol, table, counts, skipped):
    """Average values at every plane-level crossing of one segment into ``table``.

    ``sv[i, j]`` is ``<theta_j, gamma(t_i)>``, ``kv`` the second derivative
    estimate and ``mv`` the transversality margin at sample ``i``.
    """
    S, T = sv.shape
    L = s_levels.shape[0]
    s0 = s_levels[0]
    ds = s_levels[1] - s_levels[0]
    npair = S if closed else S - 1
    for j in range(T):
        for i in range(npair):
            i2 = (i + 1) % S
            a, b = sv[i, j], sv[i2, j]
            lo, hi = min(a, b), max(a, b)
            if hi == lo:
                continue
            k0 = max(int(math.ceil((lo - s0) / ds)), 0)
            k1 = min(int(math.floor((hi - s0) / ds)), L - 1)
            for k in range(k0, k1 + 1):
                lev = s_levels[k]
                if lev >= hi:
                    continue  # half-open [lo, hi) so shared samples count once
                f = (lev - a) / (b - a)
                marg = mv[i, j] * (1 - f) + mv[i2, j] * f
                if marg < tol:
                    skipped[j, k] += 1
                    continue
                table[j, k] += kv[i, j] * (1 - f) + kv[i2, j] * f
                counts[j, k] += 1


@numba.njit(cache=True)
def _radon_backproject(table, s0, ds, thetas, pts, out):
    T, L = table.shape
    for p in range(pts.shape[0]):
        acc = 0.0
        for j in range(T):
            s = pts[p, 0] * thetas[j, 0] + pts[p, 1] * thetas[j, 1] + pts[p, 2] * thetas[j, 2]
            f = (s - s0) / ds
            if f < 0.0 or f > L - 1:
                continue
            i = min(int(f), L - 2)
            a = f - i
            acc += table[j, i] * (1 - a) + table[j, i + 1] * a
        out[p] = acc


def hemisphere_directions(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - (i + 0.5) / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _perp_basis(th: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.where(np.abs(th[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    p = np.cross(ref, th)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p, np.cross(th, p)


@dataclass
class GrangeatIntermediate:
    """Radon-domain quantities for one data set.

    ``P[s, j]``: first radial Radon derivative on the plane through source ``s``
    with normal ``thetas[j]``; ``K``: its derivative in the curve parameter;
    ``table[j, k]``: second radial derivative at level ``s_levels[k]``
    (relative to the ball centre), averaged over ``counts[j, k]`` crossings.
    """

    thetas: np.ndarray
    P: np.ndarray
    K: np.ndarray
    s_levels: np.ndarray
    table: np.ndarray
    counts: np.ndarray
    skipped: np.ndarray


def grangeat_intermediate(p: ProjectionSet, n_dirs: int = 2000, ds: Optional[float] = None,
                          margin_tol: float = 0.05, alpha_step: float = 0.5,
                          max_upsample: int = 8) -> GrangeatIntermediate:
    geom: SourceGeometry = p.geometry
    if not isinstance(geom, SourceGeometry) or not geom.is_curve:
        raise ValueError("grangeat inversion needs data from a source curve")
    det = geom.detector
    s = geom.samples
    B = geom.ball
    thetas = hemisphere_directions(n_dirs)
    pb, qb = _perp_basis(thetas)
    pix_angle = det.spacing / det.sdd
    P = np.zeros((len(s), n_dirs))
    _grangeat_P(np.ascontiguousarray(p.values), s.positions, s.w, s.e_u, s.e_v, det.sdd, det.u_coords[0], det.v_coords[0],
                det.spacing, np.asarray(B.center, dtype=float), B.radius, thetas, pb, qb, alpha_step * pix_angle,
                0.5 * pix_angle, P)
    ds = ds or B.radius / 64
    nlev = int(math.ceil(B.radius / ds))
    s_levels = np.arange(-nlev - 1, nlev + 2) * ds
    table = np.zeros((n_dirs, len(s_levels)))
    counts = np.zeros(table.shape, dtype=np.int64)
    skipped = np.zeros(table.shape, dtype=np.int64)
    K = np.zeros_like(P)
    for si, seg in enumerate(geom.segments()):
        sel = np.flatnonzero(s.segment == si)
        t = s.t[sel]
        Pi = P[sel]
        # cubic spline in the curve parameter; d/dt taken analytically
        if seg.closed:
            period = seg.t1 - seg.t0
            spl = CubicSpline(np.append(t, t[0] + period), np.vstack([Pi, Pi[:1]]), axis=0, bc_type="periodic")
        else:
            spl = CubicSpline(t, Pi, axis=0)
        dspl = spl.derivative()
        K[sel] = dspl(t)
        # refine the parameter grid so consecutive plane offsets stay below ds
        step = float(np.max(np.linalg.norm(np.diff(seg.gamma(t), axis=0), axis=1))) if len(t) > 1 else 0.0
        up = int(min(max(math.ceil(step / ds), 1), max_upsample))
        if seg.closed:
            tf = t[0] + (np.arange(len(t) * up) / (len(t) * up)) * period
        else:
            tf = np.linspace(t[0], t[-1], (len(t) - 1) * up + 1)
        Kf = dspl(tf)
        gp = seg.dgamma(tf)
        tg = gp @ thetas.T
        margin = np.abs(tg) / np.linalg.norm(gp, axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            kv = np.where(margin > 0, Kf / tg, 0.0)
        sv = (seg.gamma(tf) - B.center) @ thetas.T
        _rebin_planes(np.ascontiguousarray(sv), np.ascontiguousarray(kv), np.ascontiguousarray(margin), seg.closed,
                      s_levels, margin_tol, table, counts, skipped)
    table = np.where(counts > 0, table / np.maximum(counts, 1), 0.0)
    return GrangeatIntermediate(thetas, P, K, s_levels, table, counts, skipped)


def grangeat_inverse(p: ProjectionSet, grid: VolumeGrid, n_dirs: int = 2000,
                     margin_tol: float = 0.05, check: bool = True) -> VoxelVolume:
    """``f(x) = -1/(8 pi^2) int_{S^2} d^2/ds^2 Rf(theta, <x, theta>) d theta`` from curve data."""
    geom = p.geometry
    B = geom.ball
    gi = grangeat_intermediate(p, n_dirs=n_dirs, ds=grid.voxel_size / 2, margin_tol=margin_tol)
    inner = np.abs(gi.s_levels) <= B.radius
    gap = (gi.counts == 0) & inner[None, :]
    if check and gap.any():
        j, k = np.argwhere(gap)[0]
        th = gi.thetas[j]
        raise TuyError(
            f"{int(gap.sum())} (theta, s) plane samples through the target ball have no transversal source crossing "
            f"with margin >= {margin_tol}; e.g. theta = ({th[0]:.3f}, {th[1]:.3f}, {th[2]:.3f}), s = {gi.s_levels[k]:.2f}"
        )
    vol = grid.zeros()
    inside = vol.support_mask()
    pts = vol.centers()[inside] - np.asarray(B.center)
    acc = np.zeros(len(pts))
    ds = gi.s_levels[1] - gi.s_levels[0]
    _radon_backproject(gi.table, gi.s_levels[0], ds, gi.thetas, np.ascontiguousarray(pts), acc)
    # hemisphere quadrature covers both theta and -theta
    out = np.zeros(vol.values.shape)
    out[inside] = acc * (-1.0 / (8 * math.pi**2)) * 2 * (2 * math.pi / len(gi.thetas))
    return vol.with_values(out)


# --------------------------------------------------------------------------
# spherical sources: rebin to parallel lines


def _sphere_layout(geom: SourceGeometry):
    """Row start/count of the polar rings, in sampling order."""
    polar = np.arange(0.0, 180.0 + 1e-9, geom.polar_step)
    starts, counts = [], []
    n_az = len(np.arange(0.0, 360.0 - 1e-9, geom.azimuth_step))
    k = 0
    for phi in polar:
        c = 1 if math.isclose(math.sin(math.radians(phi)), 0.0, abs_tol=1e-12) else n_az
        starts.append(k)
        counts.append(c)
        k += c
    return np.array(starts), np.array(counts), math.radians(geom.polar_step), math.radians(geom.azimuth_step)


@numba.njit(cache=True, fastmath=True, inline="always")
def _pixel(vals, s, q0, q1, q2, pos, w, eu, ev, sdd, u0, du):
    d0, d1, d2 = q0 - pos[s, 0], q1 - pos[s, 1], q2 - pos[s, 2]
    dw = d0 * w[s, 0] + d1 * w[s, 1] + d2 * w[s, 2]
    if dw <= 0.0:
        return 0.0
    rows, cols = vals.shape[1], vals.shape[2]
    fu = (sdd * (d0 * eu[s, 0] + d1 * eu[s, 1] + d2 * eu[s, 2]) / dw - u0) / du
    fv = (sdd * (d0 * ev[s, 0] + d1 * ev[s, 1] + d2 * ev[s, 2]) / dw - u0) / du
    if fu < 0.0 or fv < 0.0 or fu > cols - 1 or fv > rows - 1:
        return 0.0
    iu = min(int(fu), cols - 2)
    iv = min(int(fv), rows - 2)
    a, b = fu - iu, fv - iv
    return (vals[s, iv, iu] * (1 - a) + vals[s, iv, iu + 1] * a) * (1 - b) + (vals[s, iv + 1, iu] * (1 - a) + vals[s, iv + 1, iu + 1] * a) * b


@numba.njit(cache=True, fastmath=True, inline="always")
def _source_estimate(vals, e0, e1, e2, q0, q1, q2, Rs, starts, counts, dpol, daz, pos, w, eu, ev, sdd, u0, du):
    """Bilinear blend over the four sources around sphere point ``e`` of the rays through ``q``."""
    nrow = starts.shape[0]
    phi = math.acos(max(-1.0, min(1.0, e2 / Rs)))
    psi = math.atan2(e1, e0)
    if psi < 0.0:
        psi += 2 * math.pi
    fi = phi / dpol
    i0 = min(int(fi), nrow - 2)
    fr = min(max(fi - i0, 0.0), 1.0)
    acc = 0.0
    for r in range(2):
        row = i0 + r
        wr = (1.0 - fr) if r == 0 else fr
        if wr == 0.0:
            continue
        if counts[row] == 1:
            acc += wr * _pixel(vals, starts[row], q0, q1, q2, pos, w, eu, ev, sdd, u0, du)
            continue
        fj = psi / daz
        j0 = int(fj) % counts[row]
        fc = fj - math.floor(fj)
        j1 = (j0 + 1) % counts[row]
        acc += wr * ((1.0 - fc) * _pixel(vals, starts[row] + j0, q0, q1, q2, pos, w, eu, ev, sdd, u0, du)
                     + fc * _pixel(vals, starts[row] + j1, q0, q1, q2, pos, w, eu, ev, sdd, u0, du))
    return acc


@numba.njit(cache=True, fastmath=True)
def _rebin_sphere(vals, Rs, starts, counts, dpol, daz, pos, w, eu, ev, sdd, u0, du,
                  dirs, e1, e2, center, ucoords, rB, out):
    D, NU, _ = out.shape
    for i in range(D):
        t0, t1, t2 = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        for r in range(NU):
            for c in range(NU):
                a, b = ucoords[c], ucoords[r]
                if a * a + b * b > rB * rB * 1.0001 + 1e-9:
                    out[i, r, c] = 0.0
                    continue
                q0 = center[0] + a * e1[i, 0] + b * e2[i, 0]
                q1 = center[1] + a * e1[i, 1] + b * e2[i, 1]
                q2 = center[2] + a * e1[i, 2] + b * e2[i, 2]
                bt = q0 * t0 + q1 * t1 + q2 * t2
                disc = bt * bt - (q0 * q0 + q1 * q1 + q2 * q2) + Rs * Rs
                sq = math.sqrt(max(disc, 0.0))
                tin, tout = -bt - sq, -bt + sq
                ein = _source_estimate(vals, q0 + tin * t0, q1 + tin * t1, q2 + tin * t2, q0, q1, q2, Rs, starts, counts,
                                       dpol, daz, pos, w, eu, ev, sdd, u0, du)
                eout = _source_estimate(vals, q0 + tout * t0, q1 + tout * t1, q2 + tout * t2, q0, q1, q2, Rs, starts,
                                        counts, dpol, daz, pos, w, eu, ev, sdd, u0, du)
                out[i, r, c] = 0.5 * (ein + eout)


def rebin_to_parallel(p: ProjectionSet, grid: ParallelGrid) -> ProjectionSet:
    """Resample spherical-source cone data onto the lines of ``grid``.

    Each line meets the source sphere twice; at both points the value is a
    bilinear blend (polar by azimuth) of the four neighbouring sources, each
    read along its own ray through the line's foot point.
    """
    geom: SourceGeometry = p.geometry
    if _geom_kind(geom) != "sphere":
        raise ValueError("rebinning needs spherical-source data")
    if not np.allclose(geom.ball.center, grid.ball.center) or grid.ball.radius > geom.ball.radius + 1e-9:
        raise ValueError("parallel grid ball must match the source geometry's target ball")
    starts, counts, dpol, daz = _sphere_layout(geom)
    s = geom.samples
    det = geom.detector
    if det.rows != det.cols:
        raise ValueError("rebinning expects a square detector")
    out = np.zeros(grid.shape)
    _rebin_sphere(np.ascontiguousarray(p.values), geom.radius, starts, counts, dpol, daz, s.positions, s.w, s.e_u, s.e_v,
                  det.sdd, det.u_coords[0], det.spacing, grid.directions, grid.e1, grid.e2,
                  np.asarray(grid.ball.center, dtype=float), grid.u_coords, grid.ball.radius, out)
    return ProjectionSet(out, grid)


def spherical_inverse(p: ProjectionSet, grid: VolumeGrid, n_dirs: int = 1000,
                      cutoff: float = 0.9, parallel: Optional[ParallelGrid] = None) -> VoxelVolume:
    parallel = parallel or default_parallel_grid(grid, n_dirs)
    return fourier_slice_inverse(rebin_to_parallel(p, parallel), grid, cutoff)


def default_parallel_grid(grid: VolumeGrid, n_dirs: int) -> ParallelGrid:
    """Lines covering the inscribed ball of ``grid`` (where voxel volumes live)."""
    return ParallelGrid.hemisphere(n_dirs, grid.n, grid.voxel_size, grid.ball())


# --------------------------------------------------------------------------
# pluggable operator


@dataclass(frozen=True)
class InverseOperator:
    """A configured ``Z``: data of ``geometry`` to volumes on ``grid``.

    ``window``/``cutoff`` configure the ramp (FDK) or the Nyquist taper
    (Fourier gridding); ``n_dirs`` is the number of hemisphere directions used
    for rebinned lines or Radon plane normals.
    """

    kind: str
    geometry: Geometry
    grid: VolumeGrid
    window: str = "ramlak"
    cutoff: float = 0.9
    n_dirs: int = 1000
    margin_tol: float = 0.05
    _parallel: Optional[ParallelGrid] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in INVERSE_KINDS:
            raise ValueError(f"unknown inverse kind {self.kind!r}; expected one of {INVERSE_KINDS}")
        gk = _geom_kind(self.geometry)
        if gk not in _COMPATIBLE[self.kind]:
            raise ValueError(f"inverse {self.kind!r} is incompatible with geometry kind {gk!r}")
        if not 0 < self.cutoff <= 1:
            raise ValueError("cutoff must lie in (0, 1]")
        if self.kind == "spherical_rebin":
            object.__setattr__(self, "_parallel", default_parallel_grid(self.grid, self.n_dirs))

    @classmethod
    def default_for(cls, geometry: Geometry, grid: VolumeGrid, **kw) -> "InverseOperator":
        kind = {"parallel": "fourier_slice", "circle": "fdk", "twin_circles": "grangeat", "helix": "grangeat",
                "sphere": "spherical_rebin"}[_geom_kind(geometry)]
        if kind == "fdk":
            kw.setdefault("cutoff", 1.0)
        return cls(kind, geometry, grid, **kw)

    def __call__(self, p: ProjectionSet) -> VoxelVolume:
        if p.geometry is not self.geometry and p.geometry.fingerprint() != self.geometry.fingerprint():
            raise ValueError("projection data were acquired with a different geometry than this operator expects")
        if self.kind == "fourier_slice":
            return fourier_slice_inverse(p, self.grid, self.cutoff)
        if self.kind == "fdk":
            return fdk(p, self.grid, self.window, self.cutoff)
        if self.kind == "grangeat":
            return grangeat_inverse(p, self.grid, self.n_dirs, self.margin_tol)
        return fourier_slice_inverse(rebin_to_parallel(p, self._parallel), self.grid, self.cutoff)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "grid": self.grid.to_dict(), "window": self.window, "cutoff": self.cutoff,
                "n_dirs": self.n_dirs, "margin_tol": self.margin_tol}
