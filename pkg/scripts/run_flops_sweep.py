"""Analytic FLOPs of the 256-token, 32-token+synchronizer and 32-token+dense variants.

    python scripts/run_flops_sweep.py --out flops.csv
"""

import argparse
import json
from pathlib import Path

from mminterleaved import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("flops.csv"))
    args = ap.parse_args()
    rows = bench.sweep(bench.figure_grid())
    args.out.write_text(bench.to_csv(rows, bench.SWEEP_HEADER))
    print(json.dumps(bench.token_efficiency(), indent=2))
    print(f"wrote {len(rows)} rows to {args.out}")


if __name__ == "__main__":
    main()
