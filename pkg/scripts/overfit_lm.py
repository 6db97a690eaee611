"""Overfit the toy captioning corpus with next-token loss only.

    python scripts/overfit_lm.py --steps 500
"""

import argparse

import torch

from mminterleaved.numcore import make_rng
from mminterleaved.pipeline import MMInterleaved, compute_losses, make_batch
from mminterleaved.tasks import lm_corpus, toy_model_config, toy_train_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    corpus = lm_corpus(args.n, seed=args.seed)
    model = MMInterleaved(toy_model_config("lm"), seed=args.seed)
    res = train(model, corpus, toy_train_config("lm", args.seed), steps=args.steps)
    for rec in res.history[:: max(1, args.steps // 10)]:
        print(f"step {rec['step']:4d}  ntp {rec['ntp']:.4f}")
    model.eval()
    with torch.no_grad():
        ntp = compute_losses(model, make_batch(corpus), 0.0, make_rng(0)).ntp.item()
    print(f"final ntp on the whole corpus: {ntp:.3e}")


if __name__ == "__main__":
    main()
