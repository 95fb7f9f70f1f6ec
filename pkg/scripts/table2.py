"""Critical ROI radius (smallest radius with RL1 <= epsilon) per geometry.

Sweeps ROI fractions of rad(B) on Shepp-Logan and reports the critical radius
both as a fraction of rad(B) and rescaled to the 221-voxel reference ball.
The default tolerance b = 0.005 lets every run settle close to its limit.

    python scripts/table2.py --geometries sphere --out results/table2
"""
import argparse
import json
from pathlib import Path

import numpy as np

from roict.config import REF_BALL_VOX, RunConfig
from roict.projector import forward
from roict.roi_iter import critical_radius_sweep

REFERENCE_VOX = {"sphere": 52, "helix": 56, "circle": 67, "twin_circles": 73}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--geometries", nargs="+", default=list(REFERENCE_VOX), choices=list(REFERENCE_VOX))
    ap.add_argument("--fractions", type=float, nargs="+",
                    default=[0.2036, 0.2715, 0.3394, 0.375, 0.4072, 0.45, 0.5])
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--b", type=float, default=0.005)
    ap.add_argument("--epsilon", type=float, default=0.10)
    ap.add_argument("--out", type=Path, default=Path("results/table2"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind in args.geometries:
        cfg = RunConfig(n=args.n, geometry={"preset": kind}, iteration={"b": args.b}, epsilon=args.epsilon)
        geom = cfg.build_geometry()
        rB = geom.ball.radius
        ph = cfg.build_phantom()
        res = critical_radius_sweep(ph, geom, cfg.inverse_operator(geom), [f * rB for f in sorted(args.fractions)],
                                    args.epsilon, cfg.iter_config(), truth=cfg.truth(), data=forward(ph, geom))
        ratio = None if res.critical_radius is None else res.critical_radius / rB
        summary[kind] = {
            "critical_ratio": ratio,
            "critical_vox_221": None if ratio is None else float(np.round(ratio * REF_BALL_VOX, 1)),
            "ref_vox": REFERENCE_VOX[kind],
            "ref_ratio": REFERENCE_VOX[kind] / REF_BALL_VOX,
            "rows": [dict(r.to_dict(), fraction=r.roi_radius / rB) for r in res.rows],
        }
        shown = "none" if ratio is None else f"{ratio:.3f} ({ratio * REF_BALL_VOX:.0f} vox)"
        print(f"{kind:<13} critical {shown}; reference {REFERENCE_VOX[kind]} vox", flush=True)
    (args.out / "table2.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
