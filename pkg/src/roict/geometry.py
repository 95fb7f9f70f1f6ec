"""Source loci, detector frames, ray/ball tests and ray-set volumes.

World units are reference voxels (one unit = one voxel edge of a 256^3 grid),
so the acquisition parameters of the classical setups can be typed in as-is
and a coarser desk grid simply uses ``voxel_size > 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

KINDS = ("sphere", "helix", "circle", "twin_circles")

# relative slack used for tangency so that grazing rays count as hits
TANGENT_RTOL = 1e-12


def _vec(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite vector {v!r}")
    return a


def _unit(v) -> np.ndarray:
    a = _vec(v)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("zero vector has no direction")
    return a / n


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    def contains(self, other: "Ball", tol: float = 1e-9) -> bool:
        d = np.linalg.norm(other.center - self.center)
        return d + other.radius <= self.radius * (1 + tol) + tol

    def concentric(self, radius: float) -> "Ball":
        return Ball(self.center, radius)

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "radius": self.radius}

    @classmethod
    def from_dict(cls, d: dict) -> "Ball":
        return cls(d["center"], d["radius"])

    def __eq__(self, other):
        if not isinstance(other, Ball):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.center, other.center)

    def __hash__(self):
        return hash((self.radius, tuple(self.center)))


@dataclass(frozen=True)
class Ray:
    """Half-line ``{source + t * direction, t >= 0}``."""

    source: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source", _vec(self.source))
        d = _vec(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, source, target) -> "Ray":
        s = _vec(source)
        return cls(s, _unit(_vec(target) - s))


def rays_hit_ball(sources, directions, center, radius) -> np.ndarray:
    """Vectorized closed-ball test for half-rays; shapes broadcast over ``[..., 3]``."""
    a = np.asarray(sources, dtype=float)
    d = np.asarray(directions, dtype=float)
    c = np.asarray(center, dtype=float)
    w = c - a
    t = np.maximum(np.sum(w * d, axis=-1), 0.0)
    closest = a + t[..., None] * d - c
    dist2 = np.sum(closest * closest, axis=-1)
    return dist2 <= radius * radius * (1.0 + TANGENT_RTOL)


def ray_hits_ball(r: Ray, b: Ball) -> bool:
    return bool(rays_hit_ball(r.source, r.direction, b.center, b.radius))


def cap_cos(roi_radius: float, source_dist: float, exact: bool = False) -> float:
    """Cosine of the half-aperture of the cone of rays from a source meeting a ball.

    The default is ``v / sqrt(u^2 + v^2)`` (aperture with ``tan = u / v``), as used
    by the ray-volume bound.  ``exact=True`` gives the tangent cone of the ball,
    ``sqrt(v^2 - u^2) / v``.
    """
    u, v = float(roi_radius), float(source_dist)
    if u < 0:
        raise ValueError("roi radius must be nonnegative")
    if not v > 0 or v < u:
        raise ValueError(f"source at distance {v} lies inside the ball of radius {u}")
    if exact:
        return math.sqrt(max(v * v - u * u, 0.0)) / v
    return v / math.sqrt(u * u + v * v)


def cap_area(cos_alpha: float) -> float:
    """Area of a spherical cap on the unit sphere with half-aperture ``alpha``."""
    c = float(cos_alpha)
    if not -1.0 <= c <= 1.0:
        raise ValueError(f"cos(alpha) out of [-1, 1]: {c}")
    return 2.0 * math.pi * (1.0 - c)


# --------------------------------------------------------------------------
# source curves


@dataclass(frozen=True)
class CurveSegment:
    """One smooth piece of a source curve, parametrized on ``[t0, t1]``."""

    gamma: Callable[[np.ndarray], np.ndarray]
    dgamma: Callable[[np.ndarray], np.ndarray]
    t0: float
    t1: float
    closed: bool


def _plane_basis(normal) -> tuple[np.ndarray, np.ndarray]:
    n = _unit(normal)
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - np.dot(ref, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def _circle_segment(radius: float, normal) -> CurveSegment:
    e1, e2 = _plane_basis(normal)

    def gamma(t):
        t = np.asarray(t, dtype=float)[..., None]
        return radius * (np.cos(t) * e1 + np.sin(t) * e2)

    def dgamma(t):
        t = np.asarray(t, dtype=float)[..., None]
        return radius * (-np.sin(t) * e1 + np.cos(t) * e2)

    return CurveSegment(gamma, dgamma, 0.0, 2 * math.pi, True)


def _helix_segment(radius: float, pitch: float, turns: float) -> CurveSegment:
    k = pitch / (2 * math.pi)
    half = math.pi * turns

    def gamma(t):
        t = np.asarray(t, dtype=float)
        return np.stack([radius * np.cos(t), radius * np.sin(t), k * t], axis=-1)

    def dgamma(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-radius * np.sin(t), radius * np.cos(t), np.full_like(t, k)], axis=-1)

    return CurveSegment(gamma, dgamma, -half, half, False)


@dataclass(frozen=True)
class Detector:
    rows: int
    cols: int
    spacing: float
    sdd: float  # source to detector distance

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("detector needs at least one row and column")
        if not (self.spacing > 0 and self.sdd > 0):
            raise ValueError("detector spacing and distance must be positive")

    @property
    def u_coords(self) -> np.ndarray:
        return (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.spacing

    @property
    def v_coords(self) -> np.ndarray:
        return (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.spacing


@dataclass(frozen=True)
class SourceSamples:
    """Sampled sources with their flat-detector frames (one row per source).

    ``w`` points from the source to the ball center; ``e_u``/``e_v`` span the
    detector (columns/rows); ``weight`` is the measure of the source cell
    (arclength for curves, surface area for the sphere).
    """

    positions: np.ndarray
    w: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    det_center: np.ndarray
    t: np.ndarray
    segment: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class SourceGeometry:
    """A sampled source locus with a flat detector per source.

    ``n_views`` is the number of sources per circle (circle, twin circles) or per
    turn (helix).  Sphere sampling uses ``polar_step``/``azimuth_step`` in degrees.
    """

    kind: str
    radius: float
    detector: Detector
    ball: Ball
    n_views: int = 360
    turns: float = 1.0
    pitch: float = 0.0
    normal: tuple = (0.0, 0.0, 1.0)
    polar_step: float = 3.0
    azimuth_step: float = 5.0
    _samples: Optional[SourceSamples] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "normal", tuple(float(x) for x in _unit(self.normal)))
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.kind == "helix" and not (self.turns > 0 and self.pitch > 0):
            raise ValueError("helix needs positive turns and pitch")
        if self.kind == "sphere" and not (0 < self.polar_step <= 180 and 0 < self.azimuth_step <= 360):
            raise ValueError("sphere steps must lie in (0, 180] and (0, 360] degrees")
        offset = float(np.linalg.norm(self.ball.center))
        if not self.radius > self.ball.radius + offset:
            raise ValueError(
                f"source locus radius {self.radius} does not enclose the target ball "
                f"(radius {self.ball.radius}, center offset {offset})"
            )
        samples = self._sample()
        self._check_detector(samples)
        object.__setattr__(self, "_samples", samples)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def circle(cls, radius, detector, ball, n_views=360, normal=(0, 0, 1)):
        return cls("circle", radius, detector, ball, n_views=n_views, normal=normal)

    @classmethod
    def twin_circles(cls, radius, detector, ball, n_views=360):
        return cls("twin_circles", radius, detector, ball, n_views=n_views)

    @classmethod
    def helix(cls, radius, pitch, turns, detector, ball, n_views=128):
        return cls("helix", radius, detector, ball, n_views=n_views, turns=turns, pitch=pitch)

    @classmethod
    def sphere(cls, radius, detector, ball, polar_step=3.0, azimuth_step=5.0):
        return cls("sphere", radius, detector, ball, polar_step=polar_step, azimuth_step=azimuth_step)

    # -- curve description ---------------------------------------------------

    @property
    def is_curve(self) -> bool:
        return self.kind != "sphere"

    def segments(self) -> list[CurveSegment]:
        if self.kind == "circle":
            return [_circle_segment(self.radius, self.normal)]
        if self.kind == "twin_circles":
            return [_circle_segment(self.radius, (0, 0, 1)), _circle_segment(self.radius, (0, 1, 0))]
        if self.kind == "helix":
            return [_helix_segment(self.radius, self.pitch, self.turns)]
        raise ValueError("a spherical source set has no curve segments")

    def _segment_up(self, seg_index: int) -> np.ndarray:
        if self.kind == "circle":
            return np.asarray(self.normal)
        if self.kind == "twin_circles":
            return np.array([0.0, 0.0, 1.0]) if seg_index == 0 else np.array([0.0, 1.0, 0.0])
        return np.array([0.0, 0.0, 1.0])

    # -- sampling ------------------------------------------------------------

    @property
    def samples(self) -> SourceSamples:
        return self._samples

    def _sample(self) -> SourceSamples:
        if self.kind == "sphere":
            pos, ups, weight = self._sphere_positions()
            t = np.zeros(len(pos))
            seg = np.zeros(len(pos), dtype=int)
        else:
            pos, ups, t, seg, weight = [], [], [], [], []
            for i, s in enumerate(self.segments()):
                n = self.n_views if s.closed else int(round(self.n_views * self.turns))
                dt = (s.t1 - s.t0) / n
                ts = s.t0 + dt * np.arange(n) if s.closed else s.t0 + dt * (np.arange(n) + 0.5)
                speed = np.linalg.norm(s.dgamma(ts), axis=-1)
                wgt = speed * dt
                if not s.closed:
                    # trapezoid over the sampled parameter range
                    wgt = wgt.copy()
                    wgt[0] *= 0.5
                    wgt[-1] *= 0.5
                pos.append(s.gamma(ts))
                ups.append(np.broadcast_to(self._segment_up(i), (n, 3)))
                t.append(ts)
                seg.append(np.full(n, i))
                weight.append(wgt)
            pos, ups = np.concatenate(pos), np.concatenate(ups)
            t, seg, weight = np.concatenate(t), np.concatenate(seg), np.concatenate(weight)
        w = self.ball.center - pos
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        # fall back to another up vector where the view axis is parallel to it
        par = np.abs(np.sum(w * ups, axis=1)) > 0.999
        ups = np.array(ups, dtype=float)
        ups[par] = [1.0, 0.0, 0.0]
        e_u = np.cross(w, ups)
        e_u /= np.linalg.norm(e_u, axis=1, keepdims=True)
        e_v = np.cross(e_u, w)
        det_center = pos + self.detector.sdd * w
        return SourceSamples(pos, w, e_u, e_v, det_center, t, seg, weight)

    def _sphere_positions(self):
        polar = np.deg2rad(np.arange(0.0, 180.0 + 1e-9, self.polar_step))
        dphi = math.radians(self.polar_step)
        azim = np.deg2rad(np.arange(0.0, 360.0 - 1e-9, self.azimuth_step))
        R = self.radius
        pos, weight = [], []
        for phi in polar:
            lo, hi = max(phi - dphi / 2, 0.0), min(phi + dphi / 2, math.pi)
            band = 2 * math.pi * R * R * (math.cos(lo) - math.cos(hi))
            pole = math.isclose(math.sin(phi), 0.0, abs_tol=1e-12)
            psis = azim[:1] if pole else azim
            for psi in psis:
                pos.append([R * math.sin(phi) * math.cos(psi), R * math.sin(phi) * math.sin(psi), R * math.cos(phi)])
                weight.append(band / len(psis))
        pos = np.array(pos)
        pos[np.abs(pos) < 1e-9 * R] = 0.0
        ups = np.broadcast_to([0.0, 0.0, 1.0], pos.shape)
        return pos, ups, np.array(weight)

    def _check_detector(self, s: SourceSamples):
        d = np.linalg.norm(s.positions - self.ball.center, axis=1)
        r = self.ball.radius
        silhouette = self.detector.sdd * r / np.sqrt(d * d - r * r)
        half = 0.5 * min(self.detector.rows, self.detector.cols) * self.detector.spacing
        worst = float(silhouette.max())
        if worst > half * (1 + 1e-9):
            raise ValueError(
                f"detector half-extent {half:.2f} cannot contain the projection of the target "
                f"ball (needs {worst:.2f})"
            )

    # -- rays ----------------------------------------------------------------

    def pixel_directions(self, index: int) -> np.ndarray:
        """Unit ray directions ``[rows, cols, 3]`` of one source."""
        s = self.samples
        det = self.detector
        p = s.det_center[index][None, None, :] + det.u_coords[None, :, None] * s.e_u[index] + det.v_coords[:, None, None] * s.e_v[index]
        d = p - s.positions[index]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.samples), self.detector.rows, self.detector.cols)

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "radius": self.radius,
            "ball": self.ball.to_dict(),
            "detector": {
                "rows": self.detector.rows,
                "cols": self.detector.cols,
                "spacing": self.detector.spacing,
                "sdd": self.detector.sdd,
            },
        }
        if self.kind == "sphere":
            d.update(polar_step=self.polar_step, azimuth_step=self.azimuth_step)
        else:
            d["n_views"] = self.n_views
        if self.kind == "helix":
            d.update(turns=self.turns, pitch=self.pitch)
        if self.kind == "circle":
            d["normal"] = list(self.normal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SourceGeometry":
        det = Detector(**d["detector"])
        ball = Ball.from_dict(d["ball"])
        kw = {k: d[k] for k in ("n_views", "turns", "pitch", "polar_step", "azimuth_step") if k in d}
        if "normal" in d:
            kw["normal"] = tuple(d["normal"])
        return cls(d["kind"], d["radius"], det, ball, **kw)

    def fingerprint(self) -> str:
        import hashlib
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def sample_sources(geom: SourceGeometry) -> SourceSamples:
    return geom.samples


def truncated_ray_volume(geom: SourceGeometry, B: Ball, C: Ball, exact: bool = True) -> float:
    """Measure of the half-rays from the sources that meet ``B`` but miss ``C``.

    Uses the tangent-cone aperture by default so the result is the true ray
    measure; ``exact=False`` switches to the ``tan = u / v`` aperture of :func:`cap_cos`.
    """
    if not B.contains(C):
        raise ValueError("ROI ball is not contained in the target ball")
    s = geom.samples
    total = 0.0
    for pos, wgt in zip(s.positions, s.weight):
        aB = cap_area(cap_cos(B.radius, float(np.linalg.norm(pos - B.center)), exact))
        aC = cap_area(cap_cos(C.radius, float(np.linalg.norm(pos - C.center)), exact))
        total += wgt * (aB - aC)
    return max(total, 0.0)


def active_ray_volume(geom: SourceGeometry, B: Ball, exact: bool = True) -> float:
    s = geom.samples
    d = np.linalg.norm(s.positions - B.center, axis=1)
    return float(sum(w * cap_area(cap_cos(B.radius, di, exact)) for w, di in zip(s.weight, d)))


# --------------------------------------------------------------------------
# Tuy condition


@dataclass
class TuyReport:
    passed: bool
    worst_margin: float
    failures: list
    n_failures: int = 0
    n_samples: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "n_failures": self.n_failures,
            "n_samples": self.n_samples,
            "failures": [[list(map(float, x)), list(map(float, th))] for x, th in self.failures],
            "note": self.note,
        }


def _sobol(dim: int, n: int, seed: int) -> np.ndarray:
    m = max(int(math.ceil(math.log2(max(n, 2)))), 1)
    pts = qmc.Sobol(d=dim, scramble=True, seed=seed).random_base2(m)
    return pts[:n]


def _sphere_points(u: np.ndarray) -> np.ndarray:
    z = 2.0 * u[:, 0] - 1.0
    phi = 2.0 * math.pi * u[:, 1]
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def plane_crossings(seg: CurveSegment, theta: np.ndarray, levels: np.ndarray, n_scan: int = 4096, n_bisect: int = 40):
    """Roots of ``<theta, gamma(t)> = level`` on one segment.

    Dense scan for sign changes, then bisection.  Returns ``(level_index, t)``.
    """
    theta = np.asarray(theta, dtype=float)
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    ts = np.linspace(seg.t0, seg.t1, n_scan + 1)
    if seg.closed:
        ts = ts[:-1]
    s = seg.gamma(ts) @ theta
    a = s[None, :] - levels[:, None]
    b = np.roll(a, -1, axis=1) if seg.closed else a[:, 1:]
    a = a if seg.closed else a[:, :-1]
    hit = (a == 0) | (a * b < 0)
    li, ki = np.nonzero(hit)
    step = ts[1] - ts[0]
    lo = ts[ki].copy()
    hi = lo + step
    flo = a[li, ki]
    lev = levels[li]
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        fm = seg.gamma(mid) @ theta - lev
        left = (flo * fm) <= 0
        hi = np.where(left, mid, hi)
        lo = np.where(left, lo, mid)
        flo = np.where(left, flo, fm)
    t = 0.5 * (lo + hi)
    if seg.closed:
        span = seg.t1 - seg.t0
        t = seg.t0 + np.mod(t - seg.t0, span)
    return li, t


def tuy_check(
    geom: SourceGeometry,
    B: Ball,
    n_point_samples: int = 64,
    n_dir_samples: int = 256,
    tolerance: float = 1e-3,
    seed: int = 0,
    max_failures_kept: int = 200,
) -> TuyReport:
    """Monte Carlo check that planes through sampled points of ``B`` cut the source curve transversally.

    For each sampled point ``x`` and plane normal ``theta`` the plane
    ``<theta, y> = <theta, x>`` must meet the curve at some ``t`` with
    ``|<theta, gamma'(t)>| / |gamma'(t)| > tolerance``.
    """
    if not geom.is_curve:
        return TuyReport(True, 1.0, [], note="spherical source set: every plane through B meets the sphere")
    u = _sobol(3, n_point_samples, seed)
    r = B.radius * np.cbrt(u[:, 0])
    xs = B.center + r[:, None] * _sphere_points(u[:, 1:])
    xs = np.vstack([B.center[None, :], xs])
    axes = [np.eye(3)[i] for i in range(3)] + [np.asarray(geom._segment_up(i)) for i in range(len(geom.segments()))]
    thetas = np.vstack([_sphere_points(_sobol(2, n_dir_samples, seed + 1)), np.array(axes)])
    # sign of theta is irrelevant for planes; fold onto one hemisphere
    thetas[thetas[:, 2] < 0] *= -1

    best = np.zeros((len(xs), len(thetas)))
    for j, th in enumerate(thetas):
        levels = xs @ th
        for seg in geom.segments():
            li, t = plane_crossings(seg, th, levels)
            if len(t) == 0:
                continue
            vel = seg.dgamma(t)
            m = np.abs(vel @ th) / np.linalg.norm(vel, axis=1)
            np.maximum.at(best[:, j], li, m)
    fail_idx = np.argwhere(best == 0.0)
    failures = [(xs[i].copy(), thetas[j].copy()) for i, j in fail_idx[:max_failures_kept]]
    worst = 0.0 if len(fail_idx) else float(best.min())
    passed = len(fail_idx) == 0 and worst > tolerance
    note = "" if passed else (
        f"{len(fail_idx)} of {best.size} sampled planes miss the source curve"
        if len(fail_idx) else f"worst transversality margin {worst:.3g} <= tolerance {tolerance}"
    )
    return TuyReport(passed, worst, failures, len(fail_idx), best.size, note)
