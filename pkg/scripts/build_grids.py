"""Rebuild the packaged multiplier grids (MBRE, RMXE, OMSE r=0.5) in src/robopvar/data."""
import argparse
import time
from pathlib import Path

from robopvar.robust_optimal import build_grid, check_spec, grid_filename, save_grid

DATA = Path(__file__).resolve().parents[1] / "src" / "robopvar" / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DATA)
    ap.add_argument("--labels", nargs="+", default=["MBRE", "RMXE", "OMSE"])
    ap.add_argument("--omse-radius", type=float, default=0.5)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for label in args.labels:
        radius = args.omse_radius if label == "OMSE" else None
        t0 = time.perf_counter()
        grid = build_grid(label, radius=radius)
        worst = max(check_spec(s)["psi2"] for s in grid.specs)
        path = args.out / grid_filename(label, radius)
        save_grid(grid, path)
        print(f"{label}: {len(grid.specs)} nodes, max psi2 residual {worst:.2e}, "
              f"{time.perf_counter() - t0:.1f}s -> {path}")


if __name__ == "__main__":
    main()
