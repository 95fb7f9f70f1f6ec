"""Forward operators: cone-beam (half rays) and parallel (full lines), ROI truncation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numba
import numpy as np

from .geometry import Ball, SourceGeometry, rays_hit_ball
from .phantom import Phantom, VoxelVolume


# --------------------------------------------------------------------------
# parallel-ray sampling


@dataclass(frozen=True)
class ParallelGrid:
    """Directions on the upper hemisphere and a square ``u``-grid in each ``T(theta)``."""

    directions: np.ndarray
    nu: int
    du: float
    ball: Ball
    e1: np.ndarray = field(init=False, repr=False)
    e2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        th = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        th = th / np.linalg.norm(th, axis=1, keepdims=True)
        object.__setattr__(self, "directions", th)
        ref = np.where(np.abs(th[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
        e1 = np.cross(ref, th)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(th, e1)
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)
        if 0.5 * self.nu * self.du < self.ball.radius * (1 - 1e-9):
            raise ValueError("u-grid does not cover the shadow of the target ball")

    @classmethod
    def hemisphere(cls, n_dirs: int, nu: int, du: float, ball: Ball) -> "ParallelGrid":
        """Fibonacci lattice on ``z >= 0``; opposite directions give the same lines."""
        i = np.arange(n_dirs)
        z = 1.0 - (i + 0.5) / n_dirs
        phi = i * math.pi * (3.0 - math.sqrt(5.0))
        r = np.sqrt(1.0 - z * z)
        return cls(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1), nu, du, ball)

    @property
    def u_coords(self) -> np.ndarray:
        return (np.arange(self.nu) - (self.nu - 1) / 2.0) * self.du

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.directions), self.nu, self.nu)

    def line_points(self, index: int) -> np.ndarray:
        """Base points ``[nv, nu, 3]`` (rows along ``e2``, columns along ``e1``)."""
        u = self.u_coords
        return self.ball.center + u[None, :, None] * self.e1[index] + u[:, None, None] * self.e2[index]

    def to_dict(self) -> dict:
        return {"kind": "parallel", "directions": self.directions.tolist(), "nu": self.nu, "du": self.du, "ball": self.ball.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParallelGrid":
        return cls(np.asarray(d["directions"]), d["nu"], d["du"], Ball.from_dict(d["ball"]))

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


Geometry = Union[SourceGeometry, ParallelGrid]


# --------------------------------------------------------------------------
# projection data


@dataclass(frozen=True)
class ProjectionSet:
    """Line-integral samples ``[views, rows, cols]`` with a per-ray mask.

    ``region`` records which part of the active rays is kept: ``"full"``,
    ``"roi"`` (rays meeting ``roi``) or ``"complement"`` (rays missing it).
    """

    values: np.ndarray
    geometry: Geometry
    mask: Optional[np.ndarray] = None
    roi: Optional[Ball] = None
    region: str = "full"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.geometry.shape:
            raise ValueError(f"data shape {v.shape} does not match geometry {self.geometry.shape}")
        m = np.ones(v.shape, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if m.shape != v.shape:
            raise ValueError("mask shape mismatch")
        if not m.all():
            v = np.where(m, v, 0.0)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def kind(self) -> str:
        return "parallel" if isinstance(self.geometry, ParallelGrid) else "cone"

    def with_values(self, values) -> "ProjectionSet":
        return replace(self, values=values)

    def __add__(self, other: "ProjectionSet") -> "ProjectionSet":
        return ProjectionSet(self.values + other.values, self.geometry, self.mask | other.mask, None, "full")

    def __sub__(self, other: "ProjectionSet") -> "ProjectionSet":
        return ProjectionSet(self.values - other.values, self.geometry, self.mask | other.mask, None, "full")

    def __mul__(self, a: float) -> "ProjectionSet":
        return replace(self, values=self.values * a)

    __rmul__ = __mul__

    def l2_norm(self) -> float:
        """Discrete norm on the ray manifold (see :func:`ray_weights`)."""
        w = ray_weights(self.geometry)
        return float(np.sqrt(np.sum(w * self.values**2)))

    # raw float32 + packed mask bits + JSON sidecar
    def save(self, path) -> None:
        path = Path(path)
        np.asarray(self.values, dtype="<f4").tofile(path)
        Path(str(path) + ".mask").write_bytes(np.packbits(self.mask.ravel()).tobytes())
        meta = {
            "shape": list(self.values.shape),
            "dtype": "float32",
            "kind": self.kind,
            "geometry": self.geometry.to_dict(),
            "geometry_hash": self.geometry.fingerprint(),
            "roi": None if self.roi is None else self.roi.to_dict(),
            "region": self.region,
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "ProjectionSet":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        g = meta["geometry"]
        geom = ParallelGrid.from_dict(g) if g.get("kind") == "parallel" else SourceGeometry.from_dict(g)
        if geom.fingerprint() != meta["geometry_hash"]:
            raise ValueError(f"{path}: geometry hash mismatch")
        shape = tuple(meta["shape"])
        vals = np.fromfile(path, dtype="<f4").astype(float).reshape(shape)
        bits = np.frombuffer(Path(str(path) + ".mask").read_bytes(), dtype=np.uint8)
        mask = np.unpackbits(bits, count=int(np.prod(shape))).astype(bool).reshape(shape)
        roi = None if meta["roi"] is None else Ball.from_dict(meta["roi"])
        return cls(vals, geom, mask, roi, meta["region"])


def ray_weights(geom: Geometry) -> np.ndarray:
    """Per-ray measure: source cell (arclength or area) times pixel solid angle.

    Parallel data use ``du^2`` times the direction cell of the hemisphere.
    """
    if isinstance(geom, ParallelGrid):
        cell = 2.0 * math.pi / len(geom.directions)
        return np.full(geom.shape, cell * geom.du**2)
    det = geom.detector
    u, v = det.u_coords, det.v_coords
    r2 = det.sdd**2 + u[None, :] ** 2 + v[:, None] ** 2
    solid = det.spacing**2 * det.sdd / r2**1.5
    return geom.samples.weight[:, None, None] * solid[None, :, :]


def ray_mask(geom: Geometry, ball: Ball) -> np.ndarray:
    """True for rays meeting the closed ``ball`` (half rays for cone data, lines for parallel)."""
    out = np.zeros(geom.shape, dtype=bool)
    if isinstance(geom, ParallelGrid):
        for i, th in enumerate(geom.directions):
            p = geom.line_points(i) - ball.center
            along = p @ th
            d2 = np.sum(p * p, axis=-1) - along**2
            out[i] = d2 <= ball.radius**2 * (1 + 1e-12)
        return out
    s = geom.samples
    for i in range(len(s)):
        out[i] = rays_hit_ball(s.positions[i], geom.pixel_directions(i), ball.center, ball.radius)
    return out


# --------------------------------------------------------------------------
# ray marching kernels


@numba.njit(cache=True, inline="always")
def _clip(ax, ay, az, dx, dy, dz, tmin, lo, hi, cx, cy, cz, cr):
    t0 = tmin
    t1 = 1e300
    for a, d in ((ax, dx), (ay, dy), (az, dz)):
        if abs(d) < 1e-15:
            if a < lo or a > hi:
                return 0.0, -1.0
        else:
            ta = (lo - a) / d
            tb = (hi - a) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if cr > 0:
        wx, wy, wz = cx - ax, cy - ay, cz - az
        tc = wx * dx + wy * dy + wz * dz
        q = wx * wx + wy * wy + wz * wz - tc * tc
        disc = cr * cr - q
        if disc <= 0:
            return 0.0, -1.0
        s = math.sqrt(disc)
        if tc - s > t0:
            t0 = tc - s
        if tc + s < t1:
            t1 = tc + s
    return t0, t1


@numba.njit(cache=True, fastmath=True)
def _march(vol, lo, h, ax, ay, az, dx, dy, dz, tmin, cx, cy, cz, cr, step):
    """Trapezoid rule over trilinear samples; ``vol`` carries a one-voxel zero pad."""
    n = vol.shape[0] - 2
    hi = lo + n * h
    t0, t1 = _clip(ax, ay, az, dx, dy, dz, tmin, lo, hi, cx, cy, cz, cr)
    if t1 <= t0:
        return 0.0
    ns = int(math.ceil((t1 - t0) / step))
    if ns < 1:
        ns = 1
    dt = (t1 - t0) / ns
    base = lo + 0.5 * h
    # padded continuous index of the first sample and its increment
    x = (ax + t0 * dx - base) / h + 1.0
    y = (ay + t0 * dy - base) / h + 1.0
    z = (az + t0 * dz - base) / h + 1.0
    sx, sy, sz = dx * dt / h, dy * dt / h, dz * dt / h
    top = n + 1.0
    acc = 0.0
    for k in range(ns + 1):
        if x >= 0.0 and y >= 0.0 and z >= 0.0 and x <= top and y <= top and z <= top:
            i = min(int(x), n)
            j = min(int(y), n)
            l = min(int(z), n)
            fx, fy, fz = x - i, y - j, z - l
            gx, gy = 1.0 - fx, 1.0 - fy
            c0 = (vol[i, j, l] * gx + vol[i + 1, j, l] * fx) * gy + (vol[i, j + 1, l] * gx + vol[i + 1, j + 1, l] * fx) * fy
            c1 = (vol[i, j, l + 1] * gx + vol[i + 1, j, l + 1] * fx) * gy + (vol[i, j + 1, l + 1] * gx + vol[i + 1, j + 1, l + 1] * fx) * fy
            val = c0 + (c1 - c0) * fz
            if k == 0 or k == ns:
                val *= 0.5
            acc += val
        x += sx
        y += sy
        z += sz
    return acc * dt


@numba.njit(cache=True)
def _cone_kernel(vol, lo, h, src, dc, eu, ev, ucoords, vcoords, need, clip, step, out):
    S, R, C = out.shape
    for s in range(S):
        for r in range(R):
            for c in range(C):
                if not need[s, r, c]:
                    continue
                px = dc[s, 0] + ucoords[c] * eu[s, 0] + vcoords[r] * ev[s, 0] - src[s, 0]
                py = dc[s, 1] + ucoords[c] * eu[s, 1] + vcoords[r] * ev[s, 1] - src[s, 1]
                pz = dc[s, 2] + ucoords[c] * eu[s, 2] + vcoords[r] * ev[s, 2] - src[s, 2]
                nrm = math.sqrt(px * px + py * py + pz * pz)
                out[s, r, c] = _march(vol, lo, h, src[s, 0], src[s, 1], src[s, 2], px / nrm, py / nrm, pz / nrm,
                                      0.0, clip[0], clip[1], clip[2], clip[3], step)


@numba.njit(cache=True)
def _parallel_kernel(vol, lo, h, dirs, e1, e2, center, ucoords, need, clip, step, out):
    D, R, C = out.shape
    for s in range(D):
        for r in range(R):
            for c in range(C):
                if not need[s, r, c]:
                    continue
                ax = center[0] + ucoords[c] * e1[s, 0] + ucoords[r] * e2[s, 0]
                ay = center[1] + ucoords[c] * e1[s, 1] + ucoords[r] * e2[s, 1]
                az = center[2] + ucoords[c] * e1[s, 2] + ucoords[r] * e2[s, 2]
                out[s, r, c] = _march(vol, lo, h, ax, ay, az, dirs[s, 0], dirs[s, 1], dirs[s, 2],
                                      -1e300, clip[0], clip[1], clip[2], clip[3], step)


def _padded(f: VoxelVolume) -> np.ndarray:
    return np.pad(np.ascontiguousarray(f.values, dtype=np.float64), 1)


def _clip_ball(f: VoxelVolume) -> np.ndarray:
    # trilinear interpolant vanishes beyond this radius
    b = f.ball
    return np.array([*b.center, b.radius + math.sqrt(3.0) * f.voxel_size])


def _check_support(f: Union[VoxelVolume, Phantom], ball: Ball):
    sup = f.ball if isinstance(f, VoxelVolume) else f.support_ball
    if not ball.contains(sup, tol=1e-6):
        raise ValueError(
            f"object support (center {sup.center}, radius {sup.radius}) is not inside the "
            f"geometry's target ball (center {ball.center}, radius {ball.radius})"
        )


def forward_cone(f: Union[VoxelVolume, Phantom], geom: SourceGeometry, only: Optional[np.ndarray] = None,
                 step_fraction: float = 0.5) -> ProjectionSet:
    """Cone-beam data ``D f`` for every sampled source and detector pixel.

    Phantoms are integrated exactly; voxel volumes by trilinear sampling at
    ``step_fraction * voxel_size``.  ``only`` restricts evaluation to a subset of
    rays (others are left at zero).
    """
    _check_support(f, geom.ball)
    s = geom.samples
    det = geom.detector
    out = np.zeros(geom.shape)
    need = np.ones(geom.shape, dtype=bool) if only is None else np.asarray(only, dtype=bool)
    if isinstance(f, Phantom):
        for i in range(len(s)):
            if need[i].any():
                out[i] = f.line_integrals(s.positions[i], geom.pixel_directions(i))
        out[~need] = 0.0
        return ProjectionSet(out, geom)
    shift = f.origin
    clip = _clip_ball(f)
    clip[:3] -= shift
    _cone_kernel(_padded(f), -0.5 * f.n * f.voxel_size, f.voxel_size, s.positions - shift, s.det_center - shift,
                 s.e_u, s.e_v, det.u_coords, det.v_coords, need, clip, step_fraction * f.voxel_size, out)
    return ProjectionSet(out, geom)


def forward_parallel(f: Union[VoxelVolume, Phantom], grid: ParallelGrid, only: Optional[np.ndarray] = None,
                     step_fraction: float = 0.5) -> ProjectionSet:
    """Full-line data ``X f`` on the parallel grid."""
    _check_support(f, grid.ball)
    out = np.zeros(grid.shape)
    need = np.ones(grid.shape, dtype=bool) if only is None else np.asarray(only, dtype=bool)
    if isinstance(f, Phantom):
        for i, th in enumerate(grid.directions):
            if need[i].any():
                out[i] = f.line_integrals(grid.line_points(i), th, full_line=True)
        out[~need] = 0.0
        return ProjectionSet(out, grid)
    shift = f.origin
    lo = -0.5 * f.n * f.voxel_size
    clip = _clip_ball(f)
    clip[:3] -= shift
    _parallel_kernel(_padded(f), lo, f.voxel_size, grid.directions, grid.e1, grid.e2, grid.ball.center - shift,
                     grid.u_coords, need, clip, step_fraction * f.voxel_size, out)
    return ProjectionSet(out, grid)


def forward(f, geom: Geometry, **kw) -> ProjectionSet:
    if isinstance(geom, ParallelGrid):
        return forward_parallel(f, geom, **kw)
    return forward_cone(f, geom, **kw)


# --------------------------------------------------------------------------
# truncation


def _is_target(geom: Geometry, roi: Ball) -> bool:
    return roi == geom.ball


def truncate(p: ProjectionSet, roi: Ball, mask: Optional[np.ndarray] = None) -> ProjectionSet:
    """Keep only rays meeting ``roi`` (``D_C = 1_{R_C} D``); the rest are zeroed."""
    B = p.geometry.ball
    if not B.contains(roi):
        raise ValueError("ROI exceeds the target ball")
    if _is_target(p.geometry, roi):
        m = np.ones(p.values.shape, dtype=bool)
    else:
        m = ray_mask(p.geometry, roi) if mask is None else mask
    return ProjectionSet(p.values, p.geometry, m & p.mask, roi, "roi")


def complement(full: ProjectionSet, roi: Ball, mask: Optional[np.ndarray] = None) -> ProjectionSet:
    """Rays of ``full`` that miss ``roi`` (``Y_C = D - D_C``)."""
    if full.region != "full":
        raise ValueError("complement expects untruncated data")
    kept = truncate(full, roi, mask)
    return ProjectionSet(full.values - kept.values, full.geometry, ~kept.mask, roi, "complement")
