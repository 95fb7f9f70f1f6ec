"""Ellipsoid phantoms with exact line integrals, and voxel volumes."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Ball, Ray

# Kak & Slaney 3D Shepp-Logan head, unit coordinates.
# columns: x0 y0 z0  a b c  phi theta psi (deg)  density
SHEPP_LOGAN_3D = (
    (0.0, 0.0, 0.0, 0.69, 0.92, 0.9, 0.0, 0.0, 0.0, 2.0),
    (0.0, 0.0, 0.0, 0.6624, 0.874, 0.88, 0.0, 0.0, 0.0, -0.98),
    (-0.22, 0.0, -0.25, 0.41, 0.16, 0.21, 108.0, 0.0, 0.0, -0.02),
    (0.22, 0.0, -0.25, 0.31, 0.11, 0.22, 72.0, 0.0, 0.0, -0.02),
    (0.0, 0.35, -0.25, 0.21, 0.25, 0.5, 0.0, 0.0, 0.0, 0.02),
    (0.0, 0.1, -0.25, 0.046, 0.046, 0.046, 0.0, 0.0, 0.0, 0.02),
    (-0.08, -0.65, -0.25, 0.046, 0.023, 0.02, 0.0, 0.0, 0.0, 0.01),
    (0.06, -0.65, -0.25, 0.046, 0.023, 0.02, 90.0, 0.0, 0.0, 0.01),
    (0.06, -0.105, 0.625, 0.056, 0.04, 0.1, 90.0, 0.0, 0.0, 0.02),
    (0.0, 0.1, 0.625, 0.056, 0.056, 0.1, 0.0, 0.0, 0.0, -0.02),
)


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    angles: tuple  # z-y-z Euler angles in degrees
    density: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        ax = np.asarray(self.semi_axes, dtype=float).reshape(3)
        if not np.all(ax > 0):
            raise ValueError(f"semi-axes must be positive, got {ax}")
        object.__setattr__(self, "semi_axes", ax)
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "density", float(self.density))

    @property
    def rotation(self) -> np.ndarray:
        """Columns are the ellipsoid's axes in world coordinates."""
        return Rotation.from_euler("zyz", self.angles, degrees=True).as_matrix()

    def local(self, points: np.ndarray) -> np.ndarray:
        """Map world points into the frame where the ellipsoid is the unit ball."""
        return ((np.asarray(points, dtype=float) - self.center) @ self.rotation) / self.semi_axes

    def contains(self, points) -> np.ndarray:
        q = self.local(points)
        return np.sum(q * q, axis=-1) <= 1.0

    def chord(self, sources, directions, full_line: bool = False) -> np.ndarray:
        """Length of ``{a + t d}`` (t >= 0 unless ``full_line``) inside the ellipsoid."""
        R = self.rotation
        a = ((np.asarray(sources, dtype=float) - self.center) @ R) / self.semi_axes
        d = (np.asarray(directions, dtype=float) @ R) / self.semi_axes
        A = np.sum(d * d, axis=-1)
        Bq = np.sum(a * d, axis=-1)
        Cq = np.sum(a * a, axis=-1) - 1.0
        disc = Bq * Bq - A * Cq
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-Bq - sq) / A
        t2 = (-Bq + sq) / A
        if not full_line:
            t1 = np.maximum(t1, 0.0)
            t2 = np.maximum(t2, 0.0)
        return np.where(ok, t2 - t1, 0.0)

    def mirrored_x(self) -> "Ellipsoid":
        R = self.rotation
        M = np.diag([-1.0, 1.0, 1.0])
        Rm = M @ R @ M
        with warnings.catch_warnings():
            # gimbal lock only makes the angle triple non-unique, not wrong
            warnings.simplefilter("ignore", UserWarning)
            ang = Rotation.from_matrix(Rm).as_euler("zyz", degrees=True)
        return Ellipsoid(self.center * [-1, 1, 1], self.semi_axes, tuple(ang), self.density)

    def scaled(self, factor: float, offset=(0.0, 0.0, 0.0)) -> "Ellipsoid":
        return Ellipsoid(self.center * factor + np.asarray(offset, float), self.semi_axes * factor, self.angles, self.density)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "semi_axes": self.semi_axes.tolist(),
            "angles": list(self.angles),
            "density": self.density,
        }


@dataclass(frozen=True)
class Phantom:
    ellipsoids: tuple
    support_ball: Ball

    def __post_init__(self):
        object.__setattr__(self, "ellipsoids", tuple(self.ellipsoids))
        for e in self.ellipsoids:
            reach = np.linalg.norm(e.center - self.support_ball.center) + e.semi_axes.max()
            if reach > self.support_ball.radius * (1 + 1e-12):
                raise ValueError(f"ellipsoid centred at {e.center} leaves the support ball")

    def density(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for e in self.ellipsoids:
            out += e.density * e.contains(pts)
        return out

    def line_integrals(self, sources, directions, full_line: bool = False) -> np.ndarray:
        src = np.asarray(sources, dtype=float)
        dirs = np.asarray(directions, dtype=float)
        shape = np.broadcast_shapes(src.shape, dirs.shape)[:-1]
        out = np.zeros(shape)
        for e in self.ellipsoids:
            out += e.density * e.chord(src, dirs, full_line)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"support_ball": self.support_ball.to_dict(), "ellipsoids": [e.to_dict() for e in self.ellipsoids]},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Phantom":
        d = json.loads(text)
        if isinstance(d, list):
            d = {"ellipsoids": d}
        ells = [Ellipsoid(e["center"], e["semi_axes"], e.get("angles", (0, 0, 0)), e["density"]) for e in d["ellipsoids"]]
        if "support_ball" in d:
            ball = Ball.from_dict(d["support_ball"])
        else:
            reach = max(np.linalg.norm(e.center) + e.semi_axes.max() for e in ells)
            ball = Ball((0, 0, 0), reach)
        return cls(tuple(ells), ball)


def analytic_line_integral(p: Phantom, r: Ray) -> float:
    return float(p.line_integrals(r.source, r.direction))


def shepp_logan_3d(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Phantom:
    """Kak-Slaney 3D Shepp-Logan head scaled so that its unit ball maps to ``radius``."""
    ells = []
    for x0, y0, z0, a, b, c, phi, theta, psi, rho in SHEPP_LOGAN_3D:
        e = Ellipsoid((x0, y0, z0), (a, b, c), (phi, theta, psi), rho)
        ells.append(e.scaled(radius, center))
    return Phantom(tuple(ells), Ball(center, radius))


def ball_phantom(radius: float = 1.0, density: float = 1.0, center=(0.0, 0.0, 0.0), support: float | None = None) -> Phantom:
    e = Ellipsoid(center, (radius, radius, radius), (0, 0, 0), density)
    return Phantom((e,), Ball((0, 0, 0), support or (np.linalg.norm(center) + radius)))


# --------------------------------------------------------------------------
# voxel volumes


@dataclass(frozen=True)
class VoxelVolume:
    """Density on an ``n^3`` grid of cubic voxels.

    ``values[i, j, k]`` is the value at the voxel center
    ``origin + (index - (n - 1) / 2) * voxel_size``; ``origin`` is the grid
    center.  Values outside the inscribed ball are zeroed on construction.
    """

    values: np.ndarray
    voxel_size: float = 1.0
    origin: np.ndarray = np.zeros(3)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"expected a cubic array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        v[~grid_ball_mask(v.shape[0], self.voxel_size, v.shape[0] * self.voxel_size / 2.0)] = 0.0
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def ball(self) -> Ball:
        return Ball(self.origin, self.n * self.voxel_size / 2.0)

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - (self.n - 1) / 2.0) * self.voxel_size

    def centers(self) -> np.ndarray:
        a = self.axis()
        X, Y, Z = np.meshgrid(a, a, a, indexing="ij")
        return np.stack([X, Y, Z], axis=-1) + self.origin

    def support_mask(self) -> np.ndarray:
        n = self.values.shape[0]
        return grid_ball_mask(n, self.voxel_size, n * self.voxel_size / 2.0)

    def mask(self, ball: Ball) -> np.ndarray:
        """Voxels whose centers lie in the closed ``ball``."""
        c = self.centers() - ball.center
        return np.sum(c * c, axis=-1) <= ball.radius**2 * (1 + 1e-12)

    def with_values(self, values) -> "VoxelVolume":
        return VoxelVolume(values, self.voxel_size, self.origin)

    def __add__(self, other: "VoxelVolume") -> "VoxelVolume":
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "VoxelVolume") -> "VoxelVolume":
        return self.with_values(self.values - other.values)

    def __mul__(self, a: float) -> "VoxelVolume":
        return self.with_values(self.values * a)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, n: int, voxel_size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> "VoxelVolume":
        return cls(np.zeros((n, n, n)), voxel_size, origin)

    # raw float32, x fastest, plus a JSON sidecar
    def save(self, path) -> None:
        path = Path(path)
        np.asarray(self.values, dtype="<f4").ravel(order="F").tofile(path)
        meta = {"n": self.n, "voxel_size": self.voxel_size, "origin": self.origin.tolist(), "dtype": "float32", "order": "x-fastest"}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "VoxelVolume":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        n = int(meta["n"])
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != n**3:
            raise ValueError(f"{path}: expected {n**3} floats, found {raw.size}")
        return cls(raw.reshape((n, n, n), order="F").astype(float), meta["voxel_size"], meta["origin"])


def grid_ball_mask(n: int, voxel_size: float, radius: float) -> np.ndarray:
    a = (np.arange(n) - (n - 1) / 2.0) * voxel_size
    r2 = a[:, None, None] ** 2 + a[None, :, None] ** 2 + a[None, None, :] ** 2
    return r2 <= radius * radius * (1 + 1e-12)


def voxelize(p: Phantom, n: int, voxel_size: float, origin=(0.0, 0.0, 0.0), supersample: int = 1) -> VoxelVolume:
    """Sample the phantom at voxel centers (or average ``supersample^3`` sub-points)."""
    if n < 8:
        raise ValueError(f"grid side must be >= 8, got {n}")
    origin = np.asarray(origin, dtype=float)
    a = (np.arange(n) - (n - 1) / 2.0) * voxel_size
    out = np.zeros((n, n, n))
    s = int(supersample)
    offs = ((np.arange(s) + 0.5) / s - 0.5) * voxel_size
    # slab-wise to bound memory
    for i in range(n):
        acc = np.zeros((n, n))
        for ox in offs:
            for oy in offs:
                for oz in offs:
                    Y, Z = np.meshgrid(a + oy, a + oz, indexing="ij")
                    pts = np.stack([np.full_like(Y, a[i] + ox), Y, Z], axis=-1) + origin
                    acc += p.density(pts)
        out[i] = acc / s**3
    return VoxelVolume(out, voxel_size, origin)


def gaussian_blob(n: int, voxel_size: float, sigma: float, center=(0.0, 0.0, 0.0)) -> VoxelVolume:
    """Isotropic Gaussian ``exp(-|x - c|^2 / (2 sigma^2))`` sampled at voxel centres (world units)."""
    a = (np.arange(n) - (n - 1) / 2.0) * voxel_size
    c = np.asarray(center, dtype=float)
    r2 = (a[:, None, None] - c[0]) ** 2 + (a[None, :, None] - c[1]) ** 2 + (a[None, None, :] - c[2]) ** 2
    return VoxelVolume(np.exp(-r2 / (2.0 * sigma * sigma)), voxel_size)
