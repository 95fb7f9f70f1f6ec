"""Fixed-point ROI reconstruction ``f_{j+1} = f_0 + U f_j`` with ``U = sigma Z tau (D - D_C)``."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .geometry import Ball
from .inversion import InverseOperator
from .phantom import Phantom, VoxelVolume, voxelize
from .projector import Geometry, ProjectionSet, forward, ray_mask, truncate
from .regularize import MollifierKernel, WaveletConfig, mollify, wavelet_shrink


@dataclass(frozen=True)
class IterConfig:
    """Stopping rule and regularizers.

    ``stopping_mode="relative"`` stops once ``||f_{j+1} - f_j||_{L1(C)} <= b ||f_{j+1}||_{L1(C)}``;
    ``"absolute"`` compares the (voxel-volume weighted) L1 difference with ``b``.
    """

    b: float = 0.02
    max_iter: int = 40
    stopping_mode: str = "relative"
    mollifier: MollifierKernel = MollifierKernel()
    wavelet: WaveletConfig = WaveletConfig()
    use_image_regularizer: bool = True

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("stopping tolerance b must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.stopping_mode not in ("relative", "absolute"):
            raise ValueError("stopping_mode must be 'relative' or 'absolute'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IterConfig":
        d = dict(d)
        if "mollifier" in d:
            d["mollifier"] = MollifierKernel(**d["mollifier"])
        if "wavelet" in d:
            d["wavelet"] = WaveletConfig(**d["wavelet"])
        return cls(**d)


@dataclass
class ReconReport:
    iterations_run: int
    residuals: list
    thresholds: list
    converged: bool
    stop_reason: str
    roi: dict
    rl1: Optional[float] = None
    rl1_history: list = field(default_factory=list)
    contraction: Optional[float] = None

    def __post_init__(self):
        if len(self.residuals) != self.iterations_run:
            raise ValueError("one residual per iteration expected")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


class NonFiniteError(FloatingPointError):
    pass


def _finite(v: np.ndarray, iteration: int, stage: str):
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite values at iteration {iteration} after stage '{stage}'")


def l1_norm(values: np.ndarray, sel: np.ndarray, voxel_size: float) -> float:
    return float(np.abs(values[sel]).sum() * voxel_size**3)


def rl1_error(f: VoxelVolume, fhat: VoxelVolume, roi: Ball) -> float:
    """``sum_C |f - fhat| / sum_C |f|`` over voxel centres in the closed ROI."""
    if f.values.shape != fhat.values.shape or not math.isclose(f.voxel_size, fhat.voxel_size):
        raise ValueError("volumes live on different grids")
    sel = f.mask(roi)
    den = float(np.abs(f.values[sel]).sum())
    if den == 0.0:
        raise ZeroDivisionError("reference volume vanishes on the ROI")
    return float(np.abs(f.values[sel] - fhat.values[sel]).sum() / den)


class _Pipeline:
    """The stages shared by the iteration and the contraction estimate."""

    def __init__(self, geom: Geometry, Z: InverseOperator, roi: Ball, cfg: IterConfig, outside: Optional[np.ndarray] = None):
        self.geom, self.Z, self.roi, self.cfg = geom, Z, roi, cfg
        B = geom.ball
        if not B.contains(roi):
            raise ValueError("ROI exceeds the target ball")
        if roi == B:
            self.outside = np.zeros(geom.shape, dtype=bool)
        elif outside is not None:
            self.outside = outside
        else:
            self.outside = ray_mask(geom, B) & ~ray_mask(geom, roi)

    def sigma(self, v: VoxelVolume) -> VoxelVolume:
        return wavelet_shrink(v, self.cfg.wavelet) if self.cfg.use_image_regularizer else v

    def z_tau(self, p: ProjectionSet, iteration: int) -> VoxelVolume:
        q = mollify(p, self.cfg.mollifier)
        _finite(q.values, iteration, "mollifier")
        v = self.Z(q)
        _finite(v.values, iteration, "inverse")
        return v

    def apply_U(self, f: VoxelVolume, iteration: int = 0) -> VoxelVolume:
        if not self.outside.any():
            return f.with_values(np.zeros(f.values.shape))
        y = forward(f, self.geom, only=self.outside)
        _finite(y.values, iteration, "forward")
        v = self.sigma(self.z_tau(y, iteration))
        _finite(v.values, iteration, "wavelet")
        return v


def roi_reconstruct(
    g: ProjectionSet,
    Z: InverseOperator,
    roi: Ball,
    cfg: IterConfig = IterConfig(),
    ground_truth: Optional[VoxelVolume] = None,
    callback: Optional[Callable[[int, VoxelVolume, float], None]] = None,
) -> tuple[VoxelVolume, ReconReport]:
    """Reconstruct inside ``roi`` from truncated data ``g``.

    ``f_0 = sigma Z tau g``; each step forward-projects ``f_j`` on the rays
    missing the ROI, regularizes, inverts and adds ``f_0``.  ``f_j`` stays
    supported in the target ball.
    """
    geom = g.geometry
    if g.roi is not None and g.roi != roi:
        raise ValueError("projection data were truncated to a different ROI")
    pipe = _Pipeline(geom, Z, roi, cfg)
    if g.region == "roi" and (g.mask & pipe.outside).any():
        raise ValueError("truncated data contain rays that miss the ROI")
    f0 = pipe.sigma(pipe.z_tau(g, 0))
    _finite(f0.values, 0, "wavelet")
    sel = f0.mask(roi)
    h = f0.voxel_size
    residuals, thresholds, rl1_hist = [], [], []
    f = f0
    converged = False
    reason = "max_iter"
    for j in range(1, cfg.max_iter + 1):
        fn = f0 + pipe.apply_U(f, j)
        res = l1_norm(fn.values - f.values, sel, h)
        thr = cfg.b * l1_norm(fn.values, sel, h) if cfg.stopping_mode == "relative" else cfg.b
        residuals.append(res)
        thresholds.append(thr)
        if ground_truth is not None:
            rl1_hist.append(rl1_error(ground_truth, fn, roi))
        if callback is not None:
            callback(j, fn, res)
        f = fn
        if res <= thr:
            converged = True
            reason = "tolerance"
            break
    ratios = [b / a for a, b in zip(residuals[:-1], residuals[1:]) if a > 0 and b > 0]
    rep = ReconReport(
        iterations_run=len(residuals),
        residuals=residuals,
        thresholds=thresholds,
        converged=converged,
        stop_reason=reason,
        roi=roi.to_dict(),
        rl1=rl1_hist[-1] if rl1_hist else None,
        rl1_history=rl1_hist,
        contraction=float(np.exp(np.mean(np.log(ratios)))) if ratios else None,
    )
    return f, rep


def fixed_point_defect(f: VoxelVolume, g: ProjectionSet, Z: InverseOperator, roi: Ball, cfg: IterConfig) -> float:
    """``||f - (f_0 + U f)||_{L1(C)}`` for a candidate fixed point ``f``."""
    pipe = _Pipeline(g.geometry, Z, roi, cfg)
    f0 = pipe.sigma(pipe.z_tau(g, 0))
    r = f0 + pipe.apply_U(f)
    return l1_norm(f.values - r.values, f.mask(roi), f.voxel_size)


@dataclass
class ContractionEstimate:
    estimate: float
    per_trial_max: list
    ratios: list

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_contraction(geom: Geometry, Z: InverseOperator, roi: Ball, cfg: IterConfig = IterConfig(),
                         trials: int = 3, steps: int = 2, seed: int = 0) -> ContractionEstimate:
    """Sup-norm growth of ``U`` on random bounded volumes (power-iteration style).

    Starts are uniform in ``[-1, 1]``, masked to the target ball and
    wavelet-shrunk once.  The estimate is the geometric mean of all successive
    ratios ``||U v||_inf / ||v||_inf``.
    """
    if trials < 3:
        raise ValueError("need at least 3 trials")
    pipe = _Pipeline(geom, Z, roi, cfg)
    rng = np.random.default_rng(seed)
    grid = Z.grid
    ratios, per_trial = [], []
    for _ in range(trials):
        v = grid.zeros().with_values(rng.uniform(-1.0, 1.0, (grid.n,) * 3))
        v = wavelet_shrink(v, cfg.wavelet)
        trial = []
        for k in range(steps):
            nv = np.abs(v.values).max()
            if nv == 0:
                break
            v = pipe.apply_U(v, k + 1)
            trial.append(float(np.abs(v.values).max() / nv))
        ratios.extend(trial)
        per_trial.append(max(trial) if trial else 0.0)
    if not ratios or min(ratios) == 0.0:
        est = 0.0
    else:
        est = float(np.exp(np.mean(np.log(ratios))))
    return ContractionEstimate(est, per_trial, ratios)


@dataclass
class SweepRow:
    roi_radius: float
    rl1: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    rows: list
    epsilon: float
    critical_radius: Optional[float]

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "critical_radius": self.critical_radius, "rows": [r.to_dict() for r in self.rows]}


def critical_radius_sweep(
    obj: Union[Phantom, VoxelVolume],
    geom: Geometry,
    Z: InverseOperator,
    radii: Sequence[float],
    epsilon: float,
    cfg: IterConfig = IterConfig(),
    truth: Optional[VoxelVolume] = None,
    data: Optional[ProjectionSet] = None,
    reports: Optional[list] = None,
) -> SweepResult:
    """ROI reconstruction for each concentric radius; smallest radius with ``RL1 <= epsilon``."""
    radii = list(radii)
    if radii != sorted(radii):
        raise ValueError("radii must be sorted ascending")
    if truth is None:
        truth = obj if isinstance(obj, VoxelVolume) else voxelize(obj, Z.grid.n, Z.grid.voxel_size, Z.grid.origin)
    full = data if data is not None else forward(obj, geom)
    B = geom.ball
    rows = []
    for r in radii:
        roi = B.concentric(r)
        _, rep = roi_reconstruct(truncate(full, roi), Z, roi, cfg, ground_truth=truth)
        rows.append(SweepRow(float(r), float(rep.rl1), rep.iterations_run, rep.converged))
        if reports is not None:
            reports.append(rep)
    crit = next((row.roi_radius for row in rows if row.rl1 <= epsilon), None)
    return SweepResult(rows, epsilon, crit)


@dataclass
class EpsilonInverseCheck:
    epsilon: float
    measured: float
    passed: bool
    region: str

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon_inverse_check(f: VoxelVolume, geom: Geometry, Z: InverseOperator, roi: Ball, cfg: IterConfig = IterConfig(),
                          epsilon: float = 0.1, region: str = "ball") -> EpsilonInverseCheck:
    """``||f - Z_C D_C f||_inf / ||f||_inf`` over the target ball (or the ROI) against ``epsilon``.

    A diverging iteration (non-finite values) counts as a failure with an
    infinite measured error.
    """
    ref = float(np.abs(f.values).max())
    if ref == 0:
        raise ZeroDivisionError("reference volume is identically zero")
    g = truncate(forward(f, geom), roi)
    try:
        fhat, _ = roi_reconstruct(g, Z, roi, cfg)
        sel = f.support_mask() if region == "ball" else f.mask(roi)
        measured = float(np.abs(f.values - fhat.values)[sel].max() / ref)
    except NonFiniteError:
        measured = math.inf
    return EpsilonInverseCheck(epsilon, measured, measured <= epsilon, region)
