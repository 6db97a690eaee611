"""Perceiver-style resampler: a fixed set of learned latents cross-attends a
variable-length feature set.

Each block does ``z += CrossAttn(LN(z) -> LN(x))`` then ``z += FFN(LN(z))``.
Keys carry no positional encoding, so the output is invariant to the order
of the input features.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numcore import DimensionError, TRAIN_DTYPE, layer_norm, linear, randn, softmax
from .sequence import EmptyInputError


class ResamplerBlock(nn.Module):
    def __init__(self, dim: int, rng, dtype=TRAIN_DTYPE):
        super().__init__()
        s = dim ** -0.5
        self.ln_q_g = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.ln_q_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.ln_kv_g = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.ln_kv_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.w_q = nn.Parameter(randn(rng, (dim, dim), s, dtype))
        self.w_k = nn.Parameter(randn(rng, (dim, dim), s, dtype))
        self.w_v = nn.Parameter(randn(rng, (dim, dim), s, dtype))
        self.w_o = nn.Parameter(randn(rng, (dim, dim), s, dtype))
        self.ln_f_g = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.ln_f_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.w_1 = nn.Parameter(randn(rng, (4 * dim, dim), s, dtype))
        self.b_1 = nn.Parameter(torch.zeros(4 * dim, dtype=dtype))
        self.w_2 = nn.Parameter(randn(rng, (dim, 4 * dim), (4 * dim) ** -0.5, dtype))
        self.b_2 = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, z, x, key_mask=None):
        zq = layer_norm(z, self.ln_q_g, self.ln_q_b)
        xk = layer_norm(x, self.ln_kv_g, self.ln_kv_b)
        q = linear(zq, self.w_q)
        k = linear(xk, self.w_k)
        v = linear(xk, self.w_v)
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, :], float("-inf"))
        z = z + linear(torch.matmul(softmax(scores), v), self.w_o)
        h = torch.nn.functional.gelu(linear(layer_norm(z, self.ln_f_g, self.ln_f_b), self.w_1, self.b_1))
        return z + linear(h, self.w_2, self.b_2)


class Resampler(nn.Module):
    def __init__(self, dim: int, n_out: int, depth: int, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        if n_out < 1 or depth < 0:
            raise ValueError("resampler needs n_out >= 1 and depth >= 0")
        if rng is None:
            raise ValueError("Resampler needs an rng for initialisation")
        self.dim, self.n_out = dim, n_out
        self.latents = nn.Parameter(randn(rng, (n_out, dim), 0.02, dtype))
        self.blocks = nn.ModuleList(ResamplerBlock(dim, rng, dtype) for _ in range(depth))

    def forward(self, features: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """(S, C) -> (N_out, C), or batched (B, S, C) with optional (B, S) key mask."""
        single = features.dim() == 2
        x = features[None] if single else features
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise DimensionError(f"expected (..., S, {self.dim}) features, got {tuple(features.shape)}")
        if x.shape[1] == 0:
            raise EmptyInputError("resampler needs at least one feature")
        if key_mask is not None and not bool(key_mask.any(dim=1).all()):
            raise EmptyInputError("every batch row needs at least one unmasked feature")
        z = self.latents[None].expand(x.shape[0], -1, -1)
        for blk in self.blocks:
            z = blk(z, x, key_mask)
        return z[0] if single else z


def resample(features: torch.Tensor, params: Resampler) -> torch.Tensor:
    return params(features)
