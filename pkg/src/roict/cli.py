"""Command-line harness: ``roict <command> --config run.json --out dir``.

Each command writes into ``--out`` and reuses whatever earlier commands left
there, so ``reconstruct`` will run ``phantom``, ``project`` and ``truncate``
on demand.  Existing outputs make a command a no-op unless ``--force`` is set.
Exit codes: 0 ok, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig
from .geometry import SourceGeometry, active_ray_volume, truncated_ray_volume, tuy_check
from .phantom import VoxelVolume
from .projector import ProjectionSet, forward, ray_mask, ray_weights, truncate
from .roi_iter import SweepRow, critical_radius_sweep, roi_reconstruct, rl1_error

COMMANDS = ("phantom", "project", "truncate", "reconstruct", "sweep", "tuy", "metrics")
METRIC_COLUMNS = ("density", "geometry", "roi_radius", "RL1", "iterations", "converged")

PHANTOM_FILE = "phantom.raw"
PROJ_FILE = "projections.bin"
TRUNC_FILE = "truncated.bin"
RECON_FILE = "recon.raw"
REPORT_FILE = "report.json"


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


class Context:
    def __init__(self, cfg: RunConfig, out: Path, force: bool, workers: int, log=print):
        self.cfg, self.out, self.force, self.workers, self.log = cfg, out, force, workers, log
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def fresh(self, *names: str) -> bool:
        """True when every output exists and ``--force`` is absent."""
        return not self.force and all(self.path(n).exists() for n in names)

    @property
    def geometry_name(self) -> str:
        g = self.cfg.geometry
        return g.get("preset") or g.get("kind", "custom")

    @property
    def density_name(self) -> str:
        return self.cfg.phantom.get("name") or self.cfg.phantom.get("kind", "custom")


# --------------------------------------------------------------------------
# stages (each loads its output if present)


def stage_phantom(ctx: Context) -> VoxelVolume:
    p = ctx.path(PHANTOM_FILE)
    if ctx.fresh(PHANTOM_FILE):
        return VoxelVolume.load(p)
    vol = ctx.cfg.truth()
    vol.save(p)
    ctx.log(f"wrote {p}")
    return vol


def stage_project(ctx: Context) -> ProjectionSet:
    p = ctx.path(PROJ_FILE)
    if ctx.fresh(PROJ_FILE):
        return ProjectionSet.load(p)
    geom = ctx.cfg.build_geometry()
    obj = ctx.cfg.build_phantom()
    if ctx.cfg.acquisition == "voxel" or isinstance(obj, VoxelVolume):
        obj = stage_phantom(ctx)
    data = forward(obj, geom)
    data.save(p)
    ctx.log(f"wrote {p}")
    return data


def stage_truncate(ctx: Context) -> ProjectionSet:
    p = ctx.path(TRUNC_FILE)
    if ctx.fresh(TRUNC_FILE):
        return ProjectionSet.load(p)
    full = stage_project(ctx)
    g = truncate(full, ctx.cfg.roi())
    g.save(p)
    ctx.log(f"wrote {p}")
    return g


def _window(ctx: Context, vol: np.ndarray) -> tuple[float, float]:
    if ctx.cfg.window is not None:
        return float(ctx.cfg.window[0]), float(ctx.cfg.window[1])
    return float(vol.min()), float(vol.max())


def export_slices(vol: VoxelVolume, out: Path, prefix: str, window: tuple[float, float]):
    """8-bit PNGs of the three mid-planes (linear window) and the mid-row profile."""
    lo, hi = window
    span = hi - lo if hi > lo else 1.0
    v = vol.values
    m = vol.n // 2
    planes = {"xy": v[:, :, m].T, "xz": v[:, m, :].T, "yz": v[m, :, :].T}
    for name, a in planes.items():
        img = np.clip(np.rint((a - lo) / span * 255.0), 0, 255).astype(np.uint8)
        # image rows run top to bottom; put +y up
        Image.fromarray(img[::-1]).save(out / f"{prefix}_{name}.png", optimize=False)
    return planes["xy"][m]


def _profile_csv(path: Path, axis: np.ndarray, cols: dict):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", *cols])
    for i, x in enumerate(axis):
        w.writerow([f"{x:.6g}", *(f"{c[i]:.8g}" for c in cols.values())])
    _write_text(path, buf.getvalue())


def write_metrics(path_csv: Path, path_txt: Path, rows: list[dict]):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in METRIC_COLUMNS})
    _write_text(path_csv, buf.getvalue())
    _write_text(path_txt, format_table(rows))


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def format_table(rows: list[dict]) -> str:
    cells = [list(METRIC_COLUMNS)] + [[_fmt(r[k]) for k in METRIC_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(METRIC_COLUMNS))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_phantom(ctx: Context) -> int:
    """Voxelize the configured density."""
    if ctx.fresh(PHANTOM_FILE):
        ctx.log(f"{ctx.path(PHANTOM_FILE)} exists; nothing to do")
        return 0
    stage_phantom(ctx)
    return 0


def cmd_project(ctx: Context) -> int:
    """Simulate untruncated projections."""
    if ctx.fresh(PROJ_FILE):
        ctx.log(f"{ctx.path(PROJ_FILE)} exists; nothing to do")
        return 0
    stage_project(ctx)
    return 0


def cmd_truncate(ctx: Context) -> int:
    """Keep only rays meeting the ROI."""
    if ctx.fresh(TRUNC_FILE):
        ctx.log(f"{ctx.path(TRUNC_FILE)} exists; nothing to do")
        return 0
    stage_truncate(ctx)
    return 0


def cmd_reconstruct(ctx: Context) -> int:
    """Run the fixed-point ROI reconstruction and export slices."""
    outs = (RECON_FILE, REPORT_FILE, "profile.csv")
    if ctx.fresh(*outs):
        ctx.log(f"{ctx.path(RECON_FILE)} exists; nothing to do")
        return 0
    cfg = ctx.cfg
    truth = stage_phantom(ctx)
    g = stage_truncate(ctx)
    roi = cfg.roi()
    Z = cfg.inverse_operator(g.geometry)
    fhat, rep = roi_reconstruct(g, Z, roi, cfg.iter_config(), ground_truth=truth,
                                callback=lambda j, f, r: ctx.log(f"iteration {j}: residual {r:.6g}"))
    fhat.save(ctx.path(RECON_FILE))
    _write_text(ctx.path(REPORT_FILE), _dump({"config": cfg.to_dict(), "inverse": Z.to_dict(), "report": rep.to_dict()}))
    win = _window(ctx, truth.values)
    row_hat = export_slices(fhat, ctx.out, "recon", win)
    row_true = export_slices(truth, ctx.out, "truth", win)
    _profile_csv(ctx.path("profile.csv"), truth.axis() + truth.origin[0], {"recon": row_hat, "truth": row_true})
    ctx.log(f"RL1 {rep.rl1:.4f} after {rep.iterations_run} iterations (converged: {rep.converged})")
    return 0


def _sweep_one(args):
    cfg_dict, fraction = args
    cfg = RunConfig.from_dict(cfg_dict)
    geom = cfg.build_geometry()
    Z = cfg.inverse_operator(geom)
    obj = cfg.truth() if cfg.acquisition == "voxel" else cfg.build_phantom()
    res = critical_radius_sweep(obj, geom, Z, [fraction * geom.ball.radius], cfg.epsilon, cfg.iter_config(),
                                truth=cfg.truth(), data=_cached_data(cfg, geom, obj))
    return res.rows[0]


_DATA_CACHE: dict = {}


def _cached_data(cfg: RunConfig, geom, obj):
    key = cfg.to_json()
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = forward(obj, geom)
    return _DATA_CACHE[key]


def cmd_sweep(ctx: Context) -> int:
    """Concentric ROI-radius sweep with the critical radius."""
    outs = ("sweep.json", "metrics.csv", "metrics.txt")
    if ctx.fresh(*outs):
        ctx.log(f"{ctx.path('sweep.json')} exists; nothing to do")
        return 0
    cfg = ctx.cfg
    geom = cfg.build_geometry()
    rB = geom.ball.radius
    fracs = list(cfg.radii_fractions)
    if ctx.workers > 1 and len(fracs) > 1:
        with ProcessPoolExecutor(max_workers=min(ctx.workers, len(fracs))) as ex:
            rows = list(ex.map(_sweep_one, [(cfg.to_dict(), fr) for fr in fracs]))
    else:
        Z = cfg.inverse_operator(geom)
        truth = stage_phantom(ctx)
        full = stage_project(ctx)
        res = critical_radius_sweep(None, geom, Z, [fr * rB for fr in fracs], cfg.epsilon, cfg.iter_config(),
                                    truth=truth, data=full)
        rows = res.rows
    crit = next((r.roi_radius for r in rows if r.rl1 <= cfg.epsilon), None)
    summary = {
        "epsilon": cfg.epsilon,
        "ball_radius": rB,
        "critical_radius": crit,
        "critical_ratio": None if crit is None else crit / rB,
        "rows": [dict(r.to_dict(), fraction=fr) for r, fr in zip(rows, fracs)],
    }
    _write_text(ctx.path("sweep.json"), _dump(summary))
    table = [_metric_row(ctx, r) for r in rows]
    write_metrics(ctx.path("metrics.csv"), ctx.path("metrics.txt"), table)
    ctx.log(ctx.path("metrics.txt").read_text().rstrip())
    ctx.log("critical radius: " + ("none" if crit is None else f"{crit:.2f} ({crit / rB:.3f} of rad(B))"))
    return 0


def _metric_row(ctx: Context, r: SweepRow) -> dict:
    return {"density": ctx.density_name, "geometry": ctx.geometry_name, "roi_radius": float(r.roi_radius),
            "RL1": float(r.rl1), "iterations": int(r.iterations), "converged": bool(r.converged)}


def cmd_tuy(ctx: Context) -> int:
    """Check the Tuy condition of the source set."""
    if ctx.fresh("tuy.json"):
        rep = json.loads(ctx.path("tuy.json").read_text())
        ctx.log(f"{ctx.path('tuy.json')} exists; nothing to do")
        return 0 if rep["passed"] else 1
    geom = ctx.cfg.build_geometry()
    if not isinstance(geom, SourceGeometry):
        raise ValueError("the Tuy condition concerns cone-beam source sets, not parallel data")
    rep = tuy_check(geom, geom.ball, seed=ctx.cfg.seed)
    _write_text(ctx.path("tuy.json"), _dump(rep.to_dict()))
    if rep.passed:
        ctx.log(f"Tuy condition holds (worst margin {rep.worst_margin:.3g})")
        return 0
    print(f"Tuy condition fails: {rep.note}", file=sys.stderr)
    return 1


def masked_ray_fraction(p: ProjectionSet) -> dict:
    """Measured and predicted share of active rays removed by truncation."""
    geom = p.geometry
    w = ray_weights(geom)
    hit_b = ray_mask(geom, geom.ball)
    dropped = hit_b & ~p.mask
    measured = float((w * dropped).sum() / (w * hit_b).sum())
    out = {"measured": measured}
    if isinstance(geom, SourceGeometry) and p.roi is not None:
        out["predicted"] = truncated_ray_volume(geom, geom.ball, p.roi) / active_ray_volume(geom, geom.ball)
    return out


def cmd_metrics(ctx: Context) -> int:
    """RL1 table and masked-ray fraction for existing outputs."""
    outs = ("metrics.json",)
    if ctx.fresh(*outs):
        ctx.log(f"{ctx.path('metrics.json')} exists; nothing to do")
        return 0
    cfg = ctx.cfg
    summary = {}
    if ctx.path(TRUNC_FILE).exists():
        summary["masked_ray_fraction"] = masked_ray_fraction(ProjectionSet.load(ctx.path(TRUNC_FILE)))
    if ctx.path(RECON_FILE).exists():
        truth = stage_phantom(ctx)
        fhat = VoxelVolume.load(ctx.path(RECON_FILE))
        roi = cfg.roi()
        rep = json.loads(ctx.path(REPORT_FILE).read_text())["report"] if ctx.path(REPORT_FILE).exists() else {}
        row = {"density": ctx.density_name, "geometry": ctx.geometry_name, "roi_radius": float(roi.radius),
               "RL1": rl1_error(truth, fhat, roi), "iterations": int(rep.get("iterations_run", 0)),
               "converged": bool(rep.get("converged", False))}
        summary["reconstruction"] = row
        write_metrics(ctx.path("metrics.csv"), ctx.path("metrics.txt"), [row])
        ctx.log(ctx.path("metrics.txt").read_text().rstrip())
    if not summary:
        raise FileNotFoundError(f"nothing to measure in {ctx.out}; run truncate or reconstruct first")
    if "masked_ray_fraction" in summary:
        m = summary["masked_ray_fraction"]
        ctx.log("masked-ray fraction: " + ", ".join(f"{k} {v:.4f}" for k, v in sorted(m.items())))
    _write_text(ctx.path("metrics.json"), _dump(summary))
    return 0


HANDLERS = {
    "phantom": cmd_phantom, "project": cmd_project, "truncate": cmd_truncate, "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep, "tuy": cmd_tuy, "metrics": cmd_metrics,
}


# --------------------------------------------------------------------------
# entry point


def _grid_side(text: str) -> int:
    n = int(text)
    if n < 8:
        raise argparse.ArgumentTypeError(f"grid side must be >= 8, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run-config JSON (defaults to the built-in desk set-up)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel sweep workers")
    common.add_argument("--force", action="store_true", help="recompute even if outputs exist")
    common.add_argument("--n", type=_grid_side, help="overrides the grid side")
    common.add_argument("--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="roict", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__)
    return parser


def _load_config(args) -> RunConfig:
    try:
        d = json.loads(args.config.read_text()) if args.config else {}
        if args.seed is not None:
            d["seed"] = args.seed
        if args.n is not None:
            d["n"] = args.n
        return RunConfig.from_dict(d)
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"invalid config: {e}") from e


def _origin(e: BaseException) -> str:
    """Innermost package module the error came from."""
    mods = [Path(f.filename).stem for f in traceback.extract_tb(e.__traceback__) if "roict" in f.filename]
    return mods[-1] if mods else "cli"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = _load_config(args)
    except UsageError as e:
        print(f"roict {args.command}: {e}", file=sys.stderr)
        return 2
    log = (lambda *a, **k: None) if args.quiet else print
    ctx = Context(cfg, args.out, args.force, args.workers, log)
    _write_text(ctx.path("config.json"), cfg.to_json() + "\n")
    try:
        return HANDLERS[args.command](ctx)
    except (ValueError, ArithmeticError, OSError, KeyError) as e:
        print(f"roict {args.command}: error in {_origin(e)}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
