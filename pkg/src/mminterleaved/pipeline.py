"""End-to-end model: tokenizer, synchronized LLM, condition resampler and
diffusion decoder; the joint objective, BoI-triggered generation and the
``MMIV1`` checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"MMIV1"            5-byte magic
    u32                 header length in bytes
    header              UTF-8 JSON: {"format", "config", "extra", "tensors": [
                            {"name", "shape", "dtype": "float32", "offset", "nbytes"}]}
    payload             float32 little-endian tensors; offsets are relative to
                        the start of the payload and tile it exactly, in order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imgdec import DecoderSync, Denoiser, DenoiserConfig, NoiseSchedule, draw_noise, noise, sample
from .mmllm import LengthError, LLMConfig, MMLLM, batch_ntp_loss
from .numcore import EmptyLossError, TRAIN_DTYPE, make_rng, split_rng
from .pyramid import PyramidEncoder
from .resampler import Resampler
from .sequence import BOI, BOS, EOS, IMG, TXT, Element, Image, PackedSequence, Slot, Text, build, concat, image_is_initial, pack

MAGIC = b"MMIV1"


class FormatError(ValueError):
    pass


class CheckpointError(KeyError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    enc_res: int = 32
    n_visual: int = 8
    visual_depth: int = 2
    cond_tokens: int = 16
    cond_depth: int = 1
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    llm: LLMConfig = field(default_factory=LLMConfig)
    dec: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.llm, dict):
            self.llm = LLMConfig(**self.llm)
        if isinstance(self.dec, dict):
            self.dec = DenoiserConfig(**self.dec)
        # the decoder and LLM share the tokenizer's channel width and levels
        self.dec.image_size, self.dec.channels = self.image_size, self.channels
        self.dec.cond_tokens, self.dec.cond_dim = self.cond_tokens, self.llm.d_model
        self.dec.feat_dim, self.dec.n_levels = self.llm.d_model, self.llm.n_levels
        self.dec.max_images = self.llm.max_images

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass
class TrainConfig:
    lam: float = 10.0
    lr: float = 1e-3
    lr_decoder: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.995)
    adam_eps: float = 1e-6
    weight_decay: float = 0.0
    clip_grad: float = 1.0
    steps: int = 500
    batch_size: int = 8
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.betas = tuple(self.betas)


class MMInterleaved(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=TRAIN_DTYPE):
        super().__init__()
        self.cfg = cfg
        r_enc, r_vis, r_llm, r_cond, r_dec = split_rng(make_rng(seed), 5)
        C = cfg.llm.d_model
        self.encoder = PyramidEncoder(C, cfg.channels, cfg.llm.n_levels, r_enc, dtype)
        self.visual_resampler = Resampler(C, cfg.n_visual, cfg.visual_depth, r_vis, dtype)
        self.llm = MMLLM(cfg.llm, r_llm, dtype)
        self.cond_resampler = Resampler(C, cfg.cond_tokens, cfg.cond_depth, r_cond, dtype)
        self.decoder = Denoiser(cfg.dec, r_dec, dtype)
        self.schedule = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)

    @property
    def dtype(self):
        return self.llm.dtype

    def tokenize(self, images: torch.Tensor):
        """(B, H, W, ch) in [0, 1] -> (pyramid levels, visual tokens (B, N, C))."""
        x = images.to(self.dtype)
        r = self.cfg.enc_res
        if x.shape[1] != r or x.shape[2] != r:
            x = F.interpolate(x.permute(0, 3, 1, 2), size=(r, r), mode="nearest").permute(0, 2, 3, 1)
        levels = self.encoder(x)
        B, C = x.shape[0], levels[0].shape[-1]
        feats = torch.cat([lv.reshape(B, -1, C) for lv in levels], dim=1)
        return levels, self.visual_resampler(feats)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    contexts: list[PackedSequence]
    images: torch.Tensor  # (N_img, H, W, ch) in [0, 1], rows grouped by context
    offsets: list[int]


def make_batch(samples: Sequence[tuple[PackedSequence, torch.Tensor]], max_len: int | None = None) -> Batch:
    """Pack (sequence, its images) pairs into contexts; ``max_len=None`` keeps one sample per context."""
    seqs = [s for s, _ in samples]
    contexts = pack(seqs, max_len) if max_len else [concat([s], [i]) for i, s in enumerate(seqs)]
    rows, offsets = [], []
    for ctx in contexts:
        offsets.append(len(rows))
        rows.extend(samples[member][1][img] for member, img in ctx.origin)
    images = torch.stack(rows) if rows else torch.zeros(0)
    return Batch(contexts, images, offsets)


@dataclass
class Losses:
    ntp: torch.Tensor
    nip: torch.Tensor
    total: torch.Tensor
    n_images: int = 0

    def as_floats(self) -> dict:
        return {"ntp": self.ntp.item(), "nip": self.nip.item(), "total": self.total.item(), "n_images": self.n_images}


def eligible_images(batch: Batch) -> list[tuple[int, int, int, list[int]]]:
    """(context, image id, BoI position, visible ids in stream order) for non-initial images."""
    out = []
    for b, ctx in enumerate(batch.contexts):
        initial = image_is_initial(ctx)
        seen: list[int] = []
        seg = None
        for p, s in enumerate(ctx.slots):
            if ctx.segments[p] != seg:
                seg, seen = ctx.segments[p], []
            if s.kind == BOI:
                if not initial[s.value]:
                    out.append((b, s.value, p, list(seen)))
                seen.append(s.value)
    return out


def condition_tokens(model: MMInterleaved, hidden: torch.Tensor, batch: Batch, items) -> torch.Tensor:
    """Resample each image's preceding LLM outputs (same sample, up to and incl. its BoI)."""
    spans = []
    for b, _, p, _ in items:
        ctx = batch.contexts[b]
        start = p
        while start > 0 and ctx.segments[start - 1] == ctx.segments[p]:
            start -= 1
        spans.append((b, start, p + 1))
    S = max(e - s for _, s, e in spans)
    C = hidden.shape[-1]
    feats = hidden.new_zeros(len(spans), S, C)
    mask = torch.zeros(len(spans), S, dtype=torch.bool)
    for i, (b, s, e) in enumerate(spans):
        feats[i, : e - s] = hidden[b, s:e]
        mask[i, : e - s] = True
    return model.cond_resampler(feats, mask)


def compute_losses(
    model: MMInterleaved,
    batch: Batch,
    lam: float,
    rng: np.random.Generator,
    dropout: float = 0.0,
    replay: dict | None = None,
) -> Losses:
    """Joint objective ``ntp + lam * nip``.

    Random draws (condition dropout, then t and eps) come from ``rng`` in that
    order; passing ``replay={"t", "eps", "drop"}`` substitutes recorded draws.
    """
    vocab = model.cfg.llm.vocab
    levels, visual = model.tokenize(batch.images) if len(batch.images) else (None, None)
    logits, hidden, _ = model.llm(batch.contexts, visual, levels, batch.offsets)
    try:
        ntp = batch_ntp_loss(logits, batch.contexts, vocab)
    except EmptyLossError:
        ntp = None
    items = eligible_images(batch)
    if not items:
        if ntp is None:
            raise EmptyLossError("batch has neither NTP targets nor eligible images")
        zero = ntp.new_zeros(())
        return Losses(ntp, zero, ntp + lam * zero, 0)
    if ntp is None:
        ntp = hidden.new_zeros(())
    E = len(items)
    cond = condition_tokens(model, hidden, batch, items)
    if replay is not None:
        drop = torch.as_tensor(replay["drop"], dtype=torch.bool)
    else:
        drop = torch.from_numpy(rng.random(E) < dropout)
    cond = torch.where(drop[:, None, None], model.decoder.null(E), cond)
    rows = [batch.offsets[b] + i for b, i, _, _ in items]
    x0 = batch.images[rows].to(model.dtype) * 2 - 1
    if replay is not None:
        t, eps = replay["t"], replay["eps"]
    else:
        t, eps = draw_noise(rng, x0.shape, model.schedule.T, x0.dtype)
    sync = DecoderSync.from_lists(
        [[batch.offsets[b] + j for j in vis] for b, _, _, vis in items], levels, model.cfg.llm.max_images
    )
    x_t = noise(x0, t.numpy(), eps, model.schedule)
    with torch.set_grad_enabled(torch.is_grad_enabled() and lam != 0):
        eps_hat = model.decoder(x_t, t, cond, sync)
        nip = ((eps - eps_hat) ** 2).mean()
    return Losses(ntp, nip, ntp + lam * nip, E)


def make_optimizer(model: MMInterleaved, cfg: TrainConfig) -> torch.optim.Optimizer:
    dec = [p for n, p in model.named_parameters() if n.startswith(("decoder.", "cond_resampler."))]
    rest = [p for n, p in model.named_parameters() if not n.startswith(("decoder.", "cond_resampler."))]
    groups = [{"params": rest, "lr": cfg.lr}, {"params": dec, "lr": cfg.lr_decoder}]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(groups, lr=cfg.lr)
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def train_step(model, batch: Batch, optimizer, cfg: TrainConfig, rng) -> dict:
    """One update on the joint objective; returns the pre-update component losses."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(model, batch, cfg.lam, rng, cfg.dropout)
    losses.total.backward()
    if cfg.clip_grad:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_grad)
    optimizer.step()
    return losses.as_floats()


# --------------------------------------------------------------- generation


@dataclass
class SamplerConfig:
    temperature: float = 0.0  # 0 -> greedy
    guidance: float = 1.0
    steps: int | None = None
    seed: int = 0


@dataclass
class Generation:
    elements: list[Element]
    images: dict[int, torch.Tensor]  # generated image id -> (H, W, ch) in [0, 1]
    slots: list[Slot]


class _Session:
    """Incremental decoding over a growing interleaved stream."""

    def __init__(self, model: MMInterleaved):
        self.model = model
        self.state = model.llm.start()
        self.slots: list[Slot] = []
        self.hidden: list[torch.Tensor] = []
        self.levels: list[list[torch.Tensor]] = []  # per image, per level (H_l, W_l, C)
        self.visual: list[torch.Tensor] = []
        self.visible: list[int] = []  # images whose BoI has been fed
        self.logits = None

    def bank(self):
        if not self.levels:
            return None
        return [torch.stack([lv[l] for lv in self.levels]) for l in range(len(self.levels[0]))]

    def feed(self, slot: Slot):
        llm = self.model.llm
        if self.state.length >= llm.cfg.max_ctx:
            raise LengthError(f"context of {llm.cfg.max_ctx} positions is full")
        if slot.kind == IMG:
            emb = self.visual[slot.value][slot.index]
        else:
            emb = llm.tok_embed[llm.cfg.vocab.input_id(slot)]
        ranked = list(reversed(self.visible))
        if slot.kind == IMG and not llm.cfg.own_image_visible:
            ranked = [i for i in ranked if i != slot.value]
        self.logits, h = self.state.step(emb, ranked, self.bank())
        self.hidden.append(h)
        self.slots.append(slot)
        if slot.kind == BOI:
            self.visible.append(slot.value)

    def add_image(self, image: torch.Tensor) -> int:
        levels, visual = self.model.tokenize(image[None])
        self.levels.append([lv[0] for lv in levels])
        self.visual.append(visual[0])
        return len(self.visual) - 1


@torch.no_grad()
def generate(
    model: MMInterleaved,
    prompt: Sequence[Element],
    prompt_images: Mapping[int, torch.Tensor],
    max_new: int,
    sampler: SamplerConfig | None = None,
    forced: Sequence[int] | None = None,
) -> Generation:
    """Autoregressive continuation; a predicted BoI triggers the image decoder.

    ``prompt_images`` maps prompt image ids to (H, W, ch) tensors in [0, 1].
    ``forced`` (optional) replaces the LM's choice at each step, for scripted runs.
    """
    sampler = sampler or SamplerConfig()
    model.eval()
    rng = make_rng(sampler.seed)
    vocab = model.cfg.llm.vocab
    N = model.cfg.n_visual
    sess = _Session(model)
    seq = build(list(prompt), N, complete=False) if prompt else PackedSequence([Slot(BOS)], [], N)
    remap = {}
    for slot in seq.slots:
        if slot.kind == BOI:
            remap[slot.value] = sess.add_image(prompt_images[slot.value].to(model.dtype))
        if slot.kind in (BOI, IMG):
            slot = Slot(slot.kind, remap[slot.value], slot.index)
        sess.feed(slot)
    start = len(sess.slots)
    generated: dict[int, torch.Tensor] = {}
    for step in range(max_new):
        logits = sess.logits[: vocab.n_predict]
        if forced is not None and step < len(forced):
            tok = int(forced[step])
        elif sampler.temperature <= 0:
            tok = int(torch.argmax(logits))
        else:
            p = torch.softmax(logits.double() / sampler.temperature, dim=-1).numpy()
            tok = int(rng.choice(len(p), p=p / p.sum()))
        if tok == vocab.eos:
            break
        if tok != vocab.boi:
            sess.feed(Slot(TXT, tok))
            continue
        new_id = len(sess.visual)
        sess.feed(Slot(BOI, new_id))
        img = _draw_image(model, sess, sampler, rng)
        sess.add_image(img)
        generated[new_id] = img
        for j in range(N):
            sess.feed(Slot(IMG, new_id, j))
    return Generation(_parse_tail(sess.slots[start:]), generated, sess.slots)


def _parse_tail(slots: Sequence[Slot]) -> list[Element]:
    out: list[Element] = []
    buf: list[int] = []
    for s in slots:
        if s.kind == TXT:
            buf.append(s.value)
            continue
        if buf:
            out.append(Text(buf))
            buf = []
        if s.kind == BOI:
            out.append(Image(s.value))
    if buf:
        out.append(Text(buf))
    return out


def _draw_image(model: MMInterleaved, sess: _Session, sampler: SamplerConfig, rng) -> torch.Tensor:
    feats = torch.stack(sess.hidden)
    cond = model.cond_resampler(feats)[None]
    prev = sess.visible[:-1]
    sync = DecoderSync.from_lists([prev], sess.bank(), model.cfg.llm.max_images)
    x = sample(model.decoder, cond, sync, model.schedule, sampler.guidance, sampler.steps, rng)
    return ((x[0] + 1) / 2).clamp(0, 1)


@torch.no_grad()
def incremental_logits(model: MMInterleaved, seq: PackedSequence, images: torch.Tensor) -> torch.Tensor:
    """Logits of ``seq`` computed position by position through the KV cache."""
    sess = _Session(model)
    for i in seq.images:
        sess.add_image(images[i])
    rows = []
    for slot in seq.slots:
        sess.feed(slot)
        rows.append(sess.logits)
    return torch.stack(rows)


# --------------------------------------------------------------- checkpoints


def save(path, model: MMInterleaved, optimizer=None, extra: Mapping | None = None) -> None:
    tensors: list[tuple[str, torch.Tensor]] = [(n, p.detach()) for n, p in model.named_parameters()]
    opt_meta = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                for key, val in st.items():
                    if key == "step":
                        opt_meta[names[id(p)]] = float(val)
                    elif torch.is_tensor(val) and val.shape == p.shape:
                        tensors.append((f"optim.{names[id(p)]}.{key}", val))
    manifest, chunks, offset = [], [], 0
    for name, t in tensors:
        raw = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "MMIV1",
        "config": model.cfg.to_dict(),
        "extra": {**dict(extra or {}), "optim_steps": opt_meta},
        "tensors": manifest,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < 9 or data[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an MMIV1 checkpoint")
    (hlen,) = struct.unpack("<I", data[5:9])
    if 9 + hlen > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[9 : 9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    payload = data[9 + hlen :]
    tensors, expect = {}, 0
    for ent in header.get("tensors", []):
        n = int(np.prod(ent["shape"])) * 4 if ent["shape"] else 4
        if ent["offset"] != expect or ent["nbytes"] != n or ent["dtype"] != "float32":
            raise FormatError(f"{path}: inconsistent manifest entry for {ent['name']}")
        if expect + n > len(payload):
            raise FormatError(f"{path}: truncated payload at {ent['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=expect).reshape(ent["shape"])
        tensors[ent["name"]] = torch.from_numpy(arr.copy())
        expect += n
    if expect != len(payload):
        raise FormatError(f"{path}: {len(payload) - expect} trailing payload bytes")
    return header, tensors


def load(path, model: MMInterleaved | None = None, optimizer=None) -> tuple[MMInterleaved, dict]:
    """Restore parameters (and optimizer moments) from a checkpoint.

    Builds a fresh model from the stored config when ``model`` is None.
    """
    header, tensors = read_checkpoint(path)
    if model is None:
        model = MMInterleaved(ModelConfig.from_dict(header["config"]))
    params = dict(model.named_parameters())
    unknown = [n for n in tensors if not n.startswith("optim.") and n not in params]
    if unknown:
        raise CheckpointError(f"unknown tensor names in checkpoint: {', '.join(unknown)}")
    missing = [n for n in params if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing)}")
    with torch.no_grad():
        for n, p in params.items():
            if tuple(tensors[n].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {n}")
            p.copy_(tensors[n].to(p.dtype))
    if optimizer is not None:
        steps = header.get("extra", {}).get("optim_steps", {})
        for n, p in params.items():
            st = {}
            for key in ("exp_avg", "exp_avg_sq", "momentum_buffer"):
                k = f"optim.{n}.{key}"
                if k in tensors:
                    st[key] = tensors[k].to(p.dtype)
            if n in steps:
                st["step"] = torch.tensor(steps[n])
            if st:
                optimizer.state[p] = st
    return model, header


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
