"""Train the small denoiser on Gaussian blobs and print 100-step window means of the loss.

    python scripts/train_blobs.py --steps 400 --seed 0
"""

import argparse

from mminterleaved.tasks import train_blobs, window_means


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    _, losses = train_blobs(args.steps, seed=args.seed)
    print("window means:", ", ".join(f"{w:.4f}" for w in window_means(losses, 100)))


if __name__ == "__main__":
    main()
