"""Q(V, P) surfaces of the three curve families on one preset.

Writes a long-format CSV (mode, v_pu, p_pu, q_pu) and, when matplotlib is
installed, a PNG with one heat map per mode.

    python3 scripts/curve_surfaces.py --preset ieee1547 --out out/surfaces
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from voltpf.control_curves import ControlMode, load_preset, q_surface

MODES = ("voltvar", "voltpf", "voltpf2")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="ieee1547")
    ap.add_argument("--points", type=int, default=121)
    ap.add_argument("--out", type=Path, default=Path("out/surfaces"))
    args = ap.parse_args()

    settings = load_preset(args.preset)
    v = np.linspace(0.88, 1.12, args.points)
    p = np.linspace(0.0, 1.0, 41)
    surfaces = {m: q_surface(v, p, settings, ControlMode.parse(m)) for m in MODES}

    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "q_surfaces.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "v_pu", "p_pu", "q_pu"])
        for m, q in surfaces.items():
            for i, pi in enumerate(p):
                for j, vj in enumerate(v):
                    w.writerow([m, repr(float(vj)), repr(float(pi)), repr(float(q[i, j]))])

    # volt-VAr ignores P; volt-PF and ver. 2 shrink with it
    for m, q in surfaces.items():
        print(f"{m:8s} Q at P=1: V={v[0]:.2f} -> {q[-1, 0]:+.3f}, V={v[-1]:.2f} -> {q[-1, -1]:+.3f}; "
              f"Q at P=0.2: {q[8, 0]:+.3f} / {q[8, -1]:+.3f}")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; CSV only")
        return
    fig, axes = plt.subplots(1, len(MODES), figsize=(12, 3.6), sharey=True)
    lim = max(np.abs(q).max() for q in surfaces.values())
    for ax, (m, q) in zip(axes, surfaces.items()):
        im = ax.pcolormesh(v, p, q, cmap="RdBu", vmin=-lim, vmax=lim, shading="auto")
        ax.set_title(m)
        ax.set_xlabel("V (p.u.)")
    axes[0].set_ylabel("P / P_rated")
    fig.colorbar(im, ax=axes, label="Q / P_rated")
    fig.savefig(args.out / "q_surfaces.png", dpi=120)
    print(f"wrote {args.out / 'q_surfaces.png'}")


if __name__ == "__main__":
    main()
