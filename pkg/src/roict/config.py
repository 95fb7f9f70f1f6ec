"""Run configuration and desk-scale acquisition presets.

World units are voxels of the 256^3 reference grid.  A desk grid of side ``n``
spans the same cube ``[-128, 128]^3`` with voxel size ``256 / n``; the target
ball ``B`` is the cube's circumscribed ball (radius ``128 sqrt 3``, about 221.7)
and densities live in the inscribed ball (radius 128).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

from .geometry import Ball, Detector, SourceGeometry
from .inversion import InverseOperator, VolumeGrid
from .phantom import Phantom, VoxelVolume, ball_phantom, shepp_logan_3d, voxelize
from .projector import Geometry, ParallelGrid
from .roi_iter import IterConfig

REF_HALF = 128.0
REF_BALL_RADIUS = REF_HALF * math.sqrt(3.0)
REF_ROI_RADII = (45.0, 60.0, 75.0, 90.0)
REF_BALL_VOX = 221.0
TABLE1_FRACTIONS = tuple(r / REF_BALL_VOX for r in REF_ROI_RADII)
PHANTOM_RADIUS = 127.9  # keeps every ellipsoid inside the grid's inscribed ball


def target_ball() -> Ball:
    return Ball((0.0, 0.0, 0.0), REF_BALL_RADIUS)


def volume_grid(n: int) -> VolumeGrid:
    return VolumeGrid(n, 2.0 * REF_HALF / n)


def _spacing_for(rows: int, sdd: float, dist: float, radius: float) -> float:
    """Smallest pixel spacing (rounded up to 1/100) whose detector holds the silhouette of the ball."""
    half = sdd * radius / math.sqrt(dist * dist - radius * radius)
    return math.ceil(200.0 * half / rows * (1 + 1e-9)) / 100.0


def desk_geometry(kind: str, n_det: int = 64, **overrides) -> Geometry:
    """The four acquisition set-ups at desk resolution.

    Source radii, source-detector distances, pitch and view counts follow the
    reference set-ups; detector spacing is chosen so the detector contains the
    projection of ``B``; the sphere is sampled every 6 degrees in both angles.
    """
    B = overrides.pop("ball", target_ball())
    if kind == "sphere":
        R, sdd = overrides.pop("radius", 400.0), overrides.pop("sdd", 900.0)
        det = Detector(n_det, n_det, overrides.pop("spacing", _spacing_for(n_det, sdd, R, B.radius)), sdd)
        return SourceGeometry.sphere(R, det, B, polar_step=overrides.pop("polar_step", 6.0),
                                     azimuth_step=overrides.pop("azimuth_step", 6.0))
    if kind == "helix":
        R, sdd = overrides.pop("radius", 384.0), overrides.pop("sdd", 768.0)
        det = Detector(n_det, n_det, overrides.pop("spacing", _spacing_for(n_det, sdd, R, B.radius)), sdd)
        return SourceGeometry.helix(R, overrides.pop("pitch", 35.0), overrides.pop("turns", 8.0), det, B,
                                    n_views=overrides.pop("n_views", 128))
    if kind in ("circle", "twin_circles"):
        R, sdd = overrides.pop("radius", 1472.0), overrides.pop("sdd", 1472.0)
        det = Detector(n_det, n_det, overrides.pop("spacing", _spacing_for(n_det, sdd, R, B.radius)), sdd)
        nv = overrides.pop("n_views", 360)
        if kind == "circle":
            return SourceGeometry.circle(R, det, B, n_views=nv)
        return SourceGeometry.twin_circles(R, det, B, n_views=nv)
    if kind == "parallel":
        grid = volume_grid(overrides.pop("n", 64))
        return ParallelGrid.hemisphere(overrides.pop("n_dirs", 1000), grid.n, grid.voxel_size, grid.ball())
    raise ValueError(f"unknown preset {kind!r}")


def geometry_from_spec(spec: dict) -> Geometry:
    """``{"preset": kind, ...overrides}`` or a full serialized geometry."""
    return _geometry_cached(json.dumps(spec, sort_keys=True))


@lru_cache(maxsize=16)
def _geometry_cached(key: str) -> Geometry:
    spec = json.loads(key)
    if "preset" in spec:
        kind = spec.pop("preset")
        n_det = spec.pop("n_det", 64)
        if "ball" in spec:
            spec["ball"] = Ball.from_dict(spec["ball"])
        return desk_geometry(kind, n_det, **spec)
    if spec.get("kind") == "parallel":
        return ParallelGrid.from_dict(spec)
    return SourceGeometry.from_dict(spec)


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment.

    ``phantom`` is ``{"kind": "shepp_logan"}``, ``{"kind": "ball", "radius": r}``,
    ``{"kind": "ellipsoids", "path": file}`` (Phantom JSON) or
    ``{"kind": "volume", "path": raw}``.  ROI radii are fractions of ``rad(B)``.
    """

    phantom: dict = field(default_factory=lambda: {"kind": "shepp_logan"})
    n: int = 64
    geometry: dict = field(default_factory=lambda: {"preset": "sphere"})
    roi_center: tuple = (0.0, 0.0, 0.0)
    roi_fraction: float = TABLE1_FRACTIONS[-1]
    radii_fractions: tuple = TABLE1_FRACTIONS
    inverse: dict = field(default_factory=dict)
    iteration: dict = field(default_factory=dict)
    acquisition: str = "analytic"
    epsilon: float = 0.10
    supersample: int = 1
    window: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid side n must be >= 8")
        if self.acquisition not in ("analytic", "voxel"):
            raise ValueError("acquisition must be 'analytic' or 'voxel'")
        if list(self.radii_fractions) != sorted(self.radii_fractions):
            raise ValueError("radii_fractions must be ascending")
        for fr in (self.roi_fraction, *self.radii_fractions):
            if not 0 <= fr <= 1:
                raise ValueError("ROI fractions must lie in [0, 1]")
        p = self.phantom.get("path")
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"referenced file {p} does not exist")
        B = self.build_geometry().ball
        if not B.contains(self.roi()):
            raise ValueError("ROI is not contained in the target ball")

    # -- (de)serialization ---------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for k in ("roi_center", "radii_fractions", "window"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    # -- builders --------------------------------------------------------------
    def build_geometry(self) -> Geometry:
        spec = dict(self.geometry)
        if spec.get("preset") == "parallel":
            spec.setdefault("n", self.n)
        return geometry_from_spec(spec)

    def grid(self) -> VolumeGrid:
        return volume_grid(self.n)

    def roi(self, fraction: Optional[float] = None) -> Ball:
        B = self.build_geometry().ball
        fr = self.roi_fraction if fraction is None else fraction
        return Ball(self.roi_center, fr * B.radius)

    def build_phantom(self):
        kind = self.phantom.get("kind", "shepp_logan")
        if kind == "shepp_logan":
            return shepp_logan_3d(self.phantom.get("radius", PHANTOM_RADIUS))
        if kind == "ball":
            return ball_phantom(self.phantom.get("radius", 64.0), self.phantom.get("density", 1.0),
                                tuple(self.phantom.get("center", (0.0, 0.0, 0.0))), support=PHANTOM_RADIUS)
        if kind == "ellipsoids":
            return Phantom.from_json(Path(self.phantom["path"]).read_text())
        if kind == "volume":
            return VoxelVolume.load(self.phantom["path"])
        raise ValueError(f"unknown phantom kind {kind!r}")

    def truth(self) -> VoxelVolume:
        obj = self.build_phantom()
        if isinstance(obj, VoxelVolume):
            return obj
        g = self.grid()
        return voxelize(obj, g.n, g.voxel_size, g.origin, supersample=self.supersample)

    def inverse_operator(self, geom: Optional[Geometry] = None) -> InverseOperator:
        geom = geom or self.build_geometry()
        kw = dict(self.inverse)
        kind = kw.pop("kind", None)
        if kind is None:
            return InverseOperator.default_for(geom, self.grid(), **kw)
        return InverseOperator(kind, geom, self.grid(), **kw)

    def iter_config(self) -> IterConfig:
        return IterConfig.from_dict(self.iteration)
