"""Explicit-loop reference implementations used to cross-check the vectorised code.

Everything here is scalar Python over float64 numpy arrays: no broadcasting
tricks, no shared helpers with the production path.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def bilinear_loop(fmap: np.ndarray, u: float, v: float) -> np.ndarray:
    """Sample (H, W, C) at normalised (u, v); pixel (i, j) has its centre at ((j+.5)/W, (i+.5)/H).

    Out-of-range corners contribute zero.
    """
    H, W, C = fmap.shape
    x = u * W - 0.5
    y = v * H - 0.5
    x0 = math.floor(x)
    y0 = math.floor(y)
    out = np.zeros(C)
    for yi in (y0, y0 + 1):
        for xi in (x0, x0 + 1):
            w = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= xi < W and 0 <= yi < H:
                for c in range(C):
                    out[c] += w * fmap[yi, xi, c]
    return out


def _matvec(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    rows, cols = W.shape
    out = np.zeros(rows)
    for r in range(rows):
        acc = 0.0 if b is None else float(b[r])
        for c in range(cols):
            acc += W[r, c] * x[c]
        out[r] = acc
    return out


def mmfs_loop(
    f_q: np.ndarray,
    ref: Sequence[float],
    levels_by_rank: Sequence[Sequence[np.ndarray]],
    w_q: np.ndarray,
    b_q: np.ndarray,
    w_p: np.ndarray,
    b_p: np.ndarray,
    w_a: np.ndarray,
    b_a: np.ndarray,
    pos_embed: np.ndarray,
    n_points: int,
) -> np.ndarray:
    """Single-head synchronizer output f_o for one query.

    ``levels_by_rank[m][l]`` is level l (H_l, W_l, C) of the m-th most recent
    visible image. Offsets are laid out (k, xy); logits (l, k).
    """
    M = len(levels_by_rank)
    L = len(levels_by_rank[0])
    K = n_points
    C = levels_by_rank[0][0].shape[-1]
    base = _matvec(w_q, f_q, b_q)
    locs, logits = [], []
    for m in range(M):
        q = base + pos_embed[m]
        off = _matvec(w_p, q, b_p)
        lg = _matvec(w_a, q, b_a)
        locs.append([(ref[0] + off[2 * k], ref[1] + off[2 * k + 1]) for k in range(K)])
        logits.append([[lg[l * K + k] for k in range(K)] for l in range(L)])
    peak = max(logits[m][l][k] for m in range(M) for l in range(L) for k in range(K))
    Z = 0.0
    for m in range(M):
        for l in range(L):
            for k in range(K):
                Z += math.exp(logits[m][l][k] - peak)
    out = np.zeros(C)
    for m in range(M):
        for l in range(L):
            for k in range(K):
                a = math.exp(logits[m][l][k] - peak) / Z
                out += a * bilinear_loop(levels_by_rank[m][l], *locs[m][k])
    return out


def attention_weights_loop(logits: Sequence[float]) -> list[float]:
    peak = max(logits)
    e = [math.exp(v - peak) for v in logits]
    z = sum(e)
    return [v / z for v in e]


def self_attn_macs_loop(T: int, C: int) -> int:
    """Count multiply-accumulates of one causal-free self-attention layer by enumeration."""
    macs = 0
    for _ in range(4):  # q, k, v, o projections
        for _t in range(T):
            macs += C * C
    for _i in range(T):  # scores
        for _j in range(T):
            macs += C
    for _i in range(T):  # weighted sum
        for _j in range(T):
            macs += C
    return macs


def ffn_macs_loop(T: int, C: int, mult: int = 4) -> int:
    macs = 0
    for _t in range(T):
        macs += C * (mult * C)  # up projection
        macs += (mult * C) * C  # down projection
    return macs
