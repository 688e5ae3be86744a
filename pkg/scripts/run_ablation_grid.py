"""Run every sweep spec under configs/sweeps (or the ones named) and render
the comparison plots for each.

    python scripts/run_ablation_grid.py --out runs/ablations beta mu
"""
import argparse
from pathlib import Path

from ilnet.cli import cmd_analyze, cmd_sweep

SWEEPS = Path(__file__).resolve().parent.parent / "configs" / "sweeps"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("names", nargs="*", help="sweep names, e.g. beta theta (default: all)")
    args = ap.parse_args()
    specs = [SWEEPS / f"{n}.cfg" for n in args.names] or sorted(SWEEPS.glob("*.cfg"))
    for spec in specs:
        out = Path(args.out) / spec.stem
        print(f"sweep {spec.stem} -> {out}", flush=True)
        cmd_sweep(str(spec), str(out))
        cmd_analyze(str(out), str(out / "analysis"))


if __name__ == "__main__":
    main()
