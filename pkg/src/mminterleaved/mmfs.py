"""Multi-image, multi-scale deformable sparse attention with a gated residual.

For a query feature ``f_q`` and each visible image ``m`` (indexed by recency
rank, 0 = most recent):

    q_m      = W_q f_q + PosEmbed[rank m]
    loc_m    = ref + W_p q_m           (K points, shared by every level)
    logit_m  = W_A q_m                 (L*K logits)
    A        = softmax over the concatenated M*L*K logits
    f_o      = sum_{m,l,k} A[m,l,k] * bilinear(level_l of image m, loc_m[k])

The ``llm`` variant returns ``f_q + tanh(alpha) * f_o``; the ``decoder``
variant returns ``f_q + Conv1x1(f_o)`` with a zero-initialised convolution.
Both are exact no-ops at initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
from torch import nn

from .numcore import DimensionError, TRAIN_DTYPE, linear, randn, softmax
from .pyramid import ImagePyramid, bilinear_gather

CENTER = (0.5, 0.5)


class EmptyVisibility(ValueError):
    """plan() was asked for a query that sees no images."""


class CapacityError(ValueError):
    """More visible images than PosEmbed rows."""


class MMFS(nn.Module):
    """Parameters of one synchronizer layer (W_q, W_p, W_A, PosEmbed, gate)."""

    def __init__(
        self,
        query_dim: int,
        feat_dim: int,
        n_levels: int = 3,
        n_points: int = 4,
        max_images: int = 6,
        n_heads: int = 1,
        variant: str = "llm",
        rng=None,
        dtype=TRAIN_DTYPE,
    ):
        super().__init__()
        if min(n_levels, n_points, max_images, n_heads) < 1:
            raise ValueError("L, K, M_bar and heads must all be >= 1")
        if feat_dim % n_heads:
            raise ValueError("feat_dim must be divisible by n_heads")
        if variant not in ("llm", "decoder"):
            raise ValueError(f"unknown MMFS variant {variant!r}")
        if variant == "llm" and query_dim != feat_dim:
            raise DimensionError("the llm variant adds f_o to f_q directly; dims must match")
        if rng is None:
            raise ValueError("MMFS needs an rng for initialisation")
        self.query_dim, self.feat_dim = query_dim, feat_dim
        self.n_levels, self.n_points, self.max_images = n_levels, n_points, max_images
        self.n_heads, self.variant = n_heads, variant
        H, L, K, C = n_heads, n_levels, n_points, feat_dim

        self.w_q = nn.Parameter(randn(rng, (C, query_dim), query_dim ** -0.5, dtype))
        self.b_q = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.w_p = nn.Parameter(torch.zeros(H * K * 2, C, dtype=dtype))
        self.b_p = nn.Parameter(torch.zeros(H * K * 2, dtype=dtype))
        self.w_a = nn.Parameter(torch.zeros(H * L * K, C, dtype=dtype))
        self.b_a = nn.Parameter(torch.zeros(H * L * K, dtype=dtype))
        self.pos_embed = nn.Parameter(randn(rng, (max_images, C), 0.02, dtype))
        if variant == "llm":
            self.alpha = nn.Parameter(torch.zeros((), dtype=dtype))
        else:
            self.conv_w = nn.Parameter(torch.zeros(query_dim, C, dtype=dtype))
            self.conv_b = nn.Parameter(torch.zeros(query_dim, dtype=dtype))

    # ------------------------------------------------------------ batched core

    def plan_batch(self, f_q: torch.Tensor, ref: torch.Tensor, valid: torch.Tensor):
        """Sampling locations and weights for Q queries over M rank slots.

        f_q (Q, Dq); ref (Q, 2); valid (Q, M) bool with at least one True per row
        (rows without any are given uniform weights and must be discarded by
        the caller). Returns loc (Q, H, M, K, 2) and A (Q, H, M, L, K).
        """
        Q, M = valid.shape
        if M > self.max_images:
            raise CapacityError(f"{M} image slots exceed M_bar={self.max_images}")
        H, L, K = self.n_heads, self.n_levels, self.n_points
        q = linear(f_q, self.w_q, self.b_q)[:, None, :] + self.pos_embed[:M][None]
        offs = linear(q, self.w_p, self.b_p).reshape(Q, M, H, K, 2).permute(0, 2, 1, 3, 4)
        loc = ref[:, None, None, None, :] + offs
        logits = linear(q, self.w_a, self.b_a).reshape(Q, M, H, L * K).permute(0, 2, 1, 3)
        has_any = valid.any(dim=1)
        drop = (~valid & has_any[:, None])[:, None, :, None]
        logits = logits.masked_fill(drop, float("-inf"))
        A = softmax(logits.reshape(Q, H, M * L * K)).reshape(Q, H, M, L, K)
        return loc, A

    def attend(self, loc: torch.Tensor, A: torch.Tensor, img_idx: torch.Tensor, bank: Sequence[torch.Tensor]):
        """Weighted multi-level sampling. bank[l] is (N_img, H_l, W_l, C)."""
        Q, H, M, K, _ = loc.shape
        if len(bank) != self.n_levels:
            raise DimensionError(f"expected {self.n_levels} pyramid levels, got {len(bank)}")
        Ch = self.feat_dim // H
        idx = img_idx[:, :, None].expand(Q, M, K)
        heads = []
        for h in range(H):
            acc = None
            for l, level in enumerate(bank):
                if level.shape[-1] != self.feat_dim:
                    raise DimensionError(f"level {l} has {level.shape[-1]} channels, expected {self.feat_dim}")
                part = level if H == 1 else level[..., h * Ch : (h + 1) * Ch]
                vals = bilinear_gather(part, idx, loc[:, h])  # (Q, M, K, Ch)
                term = torch.einsum("qmk,qmkc->qc", A[:, h, :, l, :], vals)
                acc = term if acc is None else acc + term
            heads.append(acc)
        return heads[0] if H == 1 else torch.cat(heads, dim=-1)

    def gate(self, f_q: torch.Tensor, f_o: torch.Tensor) -> torch.Tensor:
        if self.variant == "llm":
            return f_q + torch.tanh(self.alpha) * f_o
        return f_q + linear(f_o, self.conv_w, self.conv_b)

    def forward(self, f_q, ref, img_idx, valid, bank):
        """Gated synchronizer output for Q queries; rows without visible images pass through."""
        if valid.shape[1] == 0 or not bool(valid.any()):
            return f_q
        loc, A = self.plan_batch(f_q, ref, valid)
        safe_idx = torch.where(valid, img_idx, torch.zeros_like(img_idx))
        f_o = self.attend(loc, A, safe_idx, bank)
        out = self.gate(f_q, f_o)
        return torch.where(valid.any(dim=1)[:, None], out, f_q)


# ------------------------------------------------------------- single query


@dataclass
class SamplingPlan:
    locations: torch.Tensor  # (M, L, K, 2), or (heads, M, L, K, 2)
    weights: torch.Tensor  # (M, L, K), or (heads, M, L, K)
    visible: list[int]  # image ids by recency rank (most recent first)


def rank_order(visible: Sequence[int]) -> list[int]:
    """Stream-ordered visible ids -> recency order (most recent first)."""
    return list(reversed(list(visible)))


def plan(f_q: torch.Tensor, ref, visible: Sequence[int], params: MMFS) -> SamplingPlan:
    """Sampling plan for one query. ``visible`` lists image ids in stream order."""
    if len(visible) == 0:
        raise EmptyVisibility("query sees no images; skip the synchronizer")
    if len(visible) > params.max_images:
        raise CapacityError(f"{len(visible)} visible images exceed M_bar={params.max_images}")
    M = len(visible)
    ref_t = torch.as_tensor(ref, dtype=f_q.dtype).reshape(1, 2)
    loc, A = params.plan_batch(f_q.reshape(1, -1), ref_t, torch.ones(1, M, dtype=torch.bool))
    L = params.n_levels
    loc = loc[0][:, :, None].expand(-1, -1, L, -1, -1)  # (H, M, L, K, 2)
    A = A[0]
    if params.n_heads == 1:
        loc, A = loc[0], A[0]
    return SamplingPlan(loc, A, rank_order(visible))


def deform_attn(pyramids: Mapping[int, ImagePyramid], plan_: SamplingPlan) -> torch.Tensor:
    """f_o = sum_{m,l,k} A[m,l,k] * bilinear(level l of image m, p[m,l,k])."""
    pyrs = [pyramids[i] for i in plan_.visible]
    L, C = pyrs[0].n_levels, pyrs[0].channels
    for p in pyrs:
        if p.n_levels != L or p.channels != C:
            raise DimensionError("pyramids must share level count and channel width")
    loc, A = plan_.locations, plan_.weights
    multi = loc.dim() == 5
    if not multi:
        loc, A = loc[None], A[None]
    if A.shape[2] != L:
        raise DimensionError(f"plan has {A.shape[2]} levels but pyramids have {L}")
    heads = loc.shape[0]
    Ch = C // heads
    out = []
    for h in range(heads):
        acc = torch.zeros(Ch, dtype=A.dtype)
        K = A.shape[3]
        zero = torch.zeros(K, dtype=torch.long)
        # images may differ in size, so each is sampled from its own map
        for m, p in enumerate(pyrs):
            for l in range(L):
                fmap = p.levels[l][..., h * Ch : (h + 1) * Ch]
                vals = bilinear_gather(fmap[None], zero, loc[h, m, l])  # (K, Ch)
                acc = acc + (A[h, m, l, :, None] * vals).sum(dim=0)
        out.append(acc)
    return torch.cat(out)


def apply_gated(f_q, ref, visible, pyramids, params: MMFS, variant: str | None = None) -> torch.Tensor:
    if variant is not None and variant != params.variant:
        raise ValueError(f"params are for the {params.variant!r} variant, not {variant!r}")
    if len(visible) == 0:
        return f_q
    f_o = deform_attn(pyramids, plan(f_q, ref, visible, params))
    return params.gate(f_q, f_o)
