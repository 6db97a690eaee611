"""Layout-copy ablation: decoder with vs without the synchronizer, several seeds.

    python scripts/run_copy_ablation.py --seeds 0 1 2 --steps 600
"""

import argparse
import json

from mminterleaved.tasks import ablation_arm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--task", default="copy", choices=["copy", "story"])
    args = ap.parse_args()
    for seed in args.seeds:
        on = ablation_arm(args.task, seed, steps=args.steps, mmfs_decoder=True)
        off = ablation_arm(args.task, seed, steps=args.steps, mmfs_decoder=False)
        print(json.dumps({"seed": seed, "mse_with": on["recon_mse"], "mse_without": off["recon_mse"],
                          "ratio": on["recon_mse"] / off["recon_mse"]}))


if __name__ == "__main__":
    main()
