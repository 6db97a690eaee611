"""Toy causal transformer over packed interleaved streams with synchronizer
layers between self-attention and the feed-forward block.

Blocks are pre-norm. A block ``i`` carries an MMFS layer when
``(i + 1) % mmfs_every == 0``. Every position queries the synchronizer with
the image center as its reference point and sees the images whose ``BoI``
precedes it in the same packed sample (at most ``max_images`` most recent).
Self-attention is causal and never crosses packed-sample boundaries.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
from torch import nn

from .mmfs import CENTER, MMFS
from .numcore import TRAIN_DTYPE, cross_entropy, layer_norm, linear, randn, softmax
from .pyramid import ImagePyramid
from .sequence import IMG, PackedSequence, Vocab, ntp_targets, visibility


class LengthError(ValueError):
    pass


@dataclass
class LLMConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    text_vocab: int = 256
    mmfs_every: int = 2
    max_ctx: int = 256
    n_levels: int = 3
    n_points: int = 4
    max_images: int = 6
    mmfs_heads: int = 1
    use_mmfs: bool = True
    own_image_visible: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.mmfs_every < 1:
            raise ValueError("n_layers and mmfs_every must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.text_vocab)

    def mmfs_layers(self) -> list[int]:
        if not self.use_mmfs:
            return []
        return [i for i in range(self.n_layers) if (i + 1) % self.mmfs_every == 0]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MMFSInputs:
    """Per-query synchronizer routing for a flattened batch of positions."""

    img_idx: torch.Tensor  # (Q, M) global image index by recency rank
    valid: torch.Tensor  # (Q, M) bool
    bank: list[torch.Tensor]  # per level (N_img, H_l, W_l, C)


class Block(nn.Module):
    def __init__(self, cfg: LLMConfig, with_mmfs: bool, rng, dtype):
        super().__init__()
        C, F = cfg.d_model, cfg.d_model * cfg.ffn_mult
        s = C ** -0.5
        self.n_heads = cfg.n_heads
        self.ln1_g = nn.Parameter(torch.ones(C, dtype=dtype))
        self.ln1_b = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.w_qkv = nn.Parameter(randn(rng, (3 * C, C), s, dtype))
        self.b_qkv = nn.Parameter(torch.zeros(3 * C, dtype=dtype))
        self.w_o = nn.Parameter(randn(rng, (C, C), s / math.sqrt(2 * cfg.n_layers), dtype))
        self.b_o = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.ln2_g = nn.Parameter(torch.ones(C, dtype=dtype))
        self.ln2_b = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.w_1 = nn.Parameter(randn(rng, (F, C), s, dtype))
        self.b_1 = nn.Parameter(torch.zeros(F, dtype=dtype))
        self.w_2 = nn.Parameter(randn(rng, (C, F), F ** -0.5 / math.sqrt(2 * cfg.n_layers), dtype))
        self.b_2 = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.mmfs = (
            MMFS(C, C, cfg.n_levels, cfg.n_points, cfg.max_images, cfg.mmfs_heads, "llm", rng, dtype)
            if with_mmfs
            else None
        )

    def forward(self, x, allowed, past=None, sync: MMFSInputs | None = None, use_mmfs=True):
        """x (B, T, C); allowed (B, T, S) bool over past+current keys."""
        B, T, C = x.shape
        H, D = self.n_heads, C // self.n_heads
        qkv = linear(layer_norm(x, self.ln1_g, self.ln1_b), self.w_qkv, self.b_qkv)
        q, k, v = qkv.reshape(B, T, 3, H, D).permute(2, 0, 3, 1, 4)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(D)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        att = torch.matmul(softmax(scores), v).transpose(1, 2).reshape(B, T, C)
        x = x + linear(att, self.w_o, self.b_o)
        if self.mmfs is not None and use_mmfs and sync is not None:
            ref = torch.tensor(CENTER, dtype=x.dtype).expand(B * T, 2)
            x = self.mmfs(x.reshape(B * T, C), ref, sync.img_idx, sync.valid, sync.bank).reshape(B, T, C)
        h = torch.nn.functional.gelu(linear(layer_norm(x, self.ln2_g, self.ln2_b), self.w_1, self.b_1))
        return x + linear(h, self.w_2, self.b_2), (k, v)


class MMLLM(nn.Module):
    def __init__(self, cfg: LLMConfig, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        if rng is None:
            raise ValueError("MMLLM needs an rng for initialisation")
        self.cfg = cfg
        C, V = cfg.d_model, cfg.vocab.n_input
        self.tok_embed = nn.Parameter(randn(rng, (V, C), 0.02, dtype))
        self.pos_embed = nn.Parameter(randn(rng, (cfg.max_ctx, C), 0.02, dtype))
        layers = set(cfg.mmfs_layers())
        self.blocks = nn.ModuleList(Block(cfg, i in layers, rng, dtype) for i in range(cfg.n_layers))
        self.lnf_g = nn.Parameter(torch.ones(C, dtype=dtype))
        self.lnf_b = nn.Parameter(torch.zeros(C, dtype=dtype))
        self.head = nn.Parameter(randn(rng, (V, C), C ** -0.5, dtype))
        self.mmfs_enabled = True

    @property
    def dtype(self):
        return self.tok_embed.dtype

    # -------------------------------------------------------------- inputs

    def embed(self, seqs: Sequence[PackedSequence], visual: torch.Tensor | None, offsets: Sequence[int]):
        """Input embeddings (B, T, C) and the valid-position mask (B, T)."""
        B = len(seqs)
        T = max(len(s) for s in seqs)
        vocab = self.cfg.vocab
        ids = torch.zeros(B, T, dtype=torch.long)
        pos = torch.zeros(B, T, dtype=torch.long)
        is_img = torch.zeros(B, T, dtype=torch.bool)
        img_rows = torch.zeros(B, T, dtype=torch.long)
        img_cols = torch.zeros(B, T, dtype=torch.long)
        valid = torch.zeros(B, T, dtype=torch.bool)
        for b, s in enumerate(seqs):
            if max(s.positions) >= self.cfg.max_ctx:
                raise LengthError(f"position {max(s.positions)} exceeds max_ctx {self.cfg.max_ctx}")
            for p, sl in enumerate(s.slots):
                valid[b, p] = True
                pos[b, p] = s.positions[p]
                if sl.kind == IMG:
                    is_img[b, p] = True
                    img_rows[b, p] = offsets[b] + sl.value
                    img_cols[b, p] = sl.index
                else:
                    ids[b, p] = vocab.input_id(sl)
        x = self.tok_embed[ids]
        if bool(is_img.any()):
            if visual is None:
                raise LookupError("sequence has image slots but no visual tokens were given")
            x = torch.where(is_img[..., None], visual[img_rows, img_cols], x)
        return x + self.pos_embed[pos], valid

    def routing(self, seqs, offsets, bank, vis_maps=None) -> MMFSInputs | None:
        if not bank or not self.cfg.mmfs_layers():
            return None
        B = len(seqs)
        T = max(len(s) for s in seqs)
        Mbar = self.cfg.max_images
        rows = []
        for b, s in enumerate(seqs):
            vis = vis_maps[b] if vis_maps is not None else visibility(s, self.cfg.own_image_visible)
            for p in range(T):
                ids = vis[p] if p < len(s) else []
                ranked = list(reversed(ids))[:Mbar]
                rows.append([offsets[b] + i for i in ranked])
        M = max((len(r) for r in rows), default=0)
        if M == 0:
            return None
        img_idx = torch.zeros(B * T, M, dtype=torch.long)
        valid = torch.zeros(B * T, M, dtype=torch.bool)
        for q, r in enumerate(rows):
            img_idx[q, : len(r)] = torch.tensor(r, dtype=torch.long)
            valid[q, : len(r)] = True
        return MMFSInputs(img_idx, valid, list(bank))

    @staticmethod
    def attention_mask(seqs, T):
        B = len(seqs)
        seg = torch.full((B, T), -1, dtype=torch.long)
        for b, s in enumerate(seqs):
            seg[b, : len(s)] = torch.tensor(s.segments, dtype=torch.long)
        causal = torch.ones(T, T, dtype=torch.bool).tril()
        same = (seg[:, :, None] == seg[:, None, :]) & (seg[:, None, :] >= 0)
        allowed = causal[None] & same
        # padded rows attend to themselves to stay finite
        eye = torch.eye(T, dtype=torch.bool)[None]
        return allowed | (eye & (seg[:, :, None] < 0))

    # -------------------------------------------------------------- forward

    def forward(self, seqs, visual=None, bank=None, offsets=None, vis_maps=None):
        """Batched forward over packed contexts.

        visual: (N_img, N, C) visual tokens; bank: per level (N_img, H_l, W_l, C);
        offsets[b] maps context-local image ids to rows of visual/bank.
        Returns logits (B, T, V), hidden (B, T, C) and the valid mask (B, T).
        """
        if isinstance(seqs, PackedSequence):
            seqs = [seqs]
        offsets = offsets if offsets is not None else [0] * len(seqs)
        x, valid = self.embed(seqs, visual, offsets)
        T = x.shape[1]
        allowed = self.attention_mask(seqs, T)
        sync = self.routing(seqs, offsets, bank, vis_maps)
        for blk in self.blocks:
            x, _ = blk(x, allowed, sync=sync, use_mmfs=self.mmfs_enabled)
        hidden = layer_norm(x, self.lnf_g, self.lnf_b)
        return linear(hidden, self.head), hidden, valid

    def forward_single(
        self,
        seq: PackedSequence,
        vis: list[list[int]] | None,
        visual_tokens: Mapping[int, torch.Tensor],
        pyramids: Mapping[int, ImagePyramid],
    ):
        """Single-sequence forward keyed by image id -> (logits (T, V), hidden (T, C))."""
        for i in seq.images:
            if i not in visual_tokens or (self.cfg.mmfs_layers() and i not in pyramids):
                raise LookupError(f"missing visual tokens or pyramid for image {i}")
        order = list(seq.images)
        remap = {img: j for j, img in enumerate(order)}
        local = PackedSequence(
            [type(sl)(sl.kind, remap[sl.value], sl.index) if sl.kind in ("boi", IMG) else sl for sl in seq.slots],
            [remap[i] for i in order],
            seq.n_tokens,
            seq.segments,
            seq.positions,
        )
        vis_local = None if vis is None else [[[remap[i] for i in v] for v in vis]]
        visual = torch.stack([visual_tokens[i] for i in order]) if order else None
        bank = None
        if order and self.cfg.mmfs_layers():
            L = pyramids[order[0]].n_levels
            bank = [torch.stack([pyramids[i].levels[l] for i in order]) for l in range(L)]
        logits, hidden, _ = self.forward([local], visual, bank, [0], vis_local)
        return logits[0], hidden[0]

    # ---------------------------------------------------------- incremental

    def start(self) -> "DecodeState":
        return DecodeState(self)


class DecodeState:
    """Key/value cache for one sequence, advanced one position at a time."""

    def __init__(self, model: MMLLM):
        self.model = model
        self.cache: list[tuple[torch.Tensor, torch.Tensor] | None] = [None] * len(model.blocks)
        self.length = 0

    def step(self, emb: torch.Tensor, img_idx: Sequence[int], bank) -> tuple[torch.Tensor, torch.Tensor]:
        """Feed one input embedding (C,) (without positional term).

        ``img_idx`` lists bank rows of visible images, most recent first.
        Returns logits (V,) and hidden (C,) for the new position.
        """
        m = self.model
        if self.length >= m.cfg.max_ctx:
            raise LengthError(f"context length {m.cfg.max_ctx} exhausted")
        x = (emb + m.pos_embed[self.length])[None, None]
        allowed = torch.ones(1, 1, self.length + 1, dtype=torch.bool)
        ranked = list(img_idx)[: m.cfg.max_images]
        sync = None
        if ranked and bank:
            sync = MMFSInputs(
                torch.tensor([ranked], dtype=torch.long),
                torch.ones(1, len(ranked), dtype=torch.bool),
                list(bank),
            )
        for i, blk in enumerate(m.blocks):
            x, kv = blk(x, allowed, past=self.cache[i], sync=sync, use_mmfs=m.mmfs_enabled)
            self.cache[i] = kv
        self.length += 1
        hidden = layer_norm(x, m.lnf_g, m.lnf_b)[0, 0]
        return linear(hidden, m.head), hidden


def ntp_loss(logits: torch.Tensor, seq: PackedSequence, vocab: Vocab) -> torch.Tensor:
    """Masked mean cross-entropy of next-slot prediction for one sequence."""
    targets, mask = ntp_targets(seq, vocab)
    return cross_entropy(logits[: len(seq)], targets, mask)


def batch_ntp_loss(logits: torch.Tensor, seqs: Sequence[PackedSequence], vocab: Vocab) -> torch.Tensor:
    rows, targets, mask = [], [], []
    for b, s in enumerate(seqs):
        t, m = ntp_targets(s, vocab)
        rows.append(logits[b, : len(s)])
        targets += t
        mask += m
    return cross_entropy(torch.cat(rows), targets, mask)
