"""Synthetic corpora and the training/evaluation loops built on them.

* ``lm``    - two images per sample, each followed by a caption that is a fixed
              function of the image's class; overfits to near-zero NTP loss.
* ``copy``  - ``[layout, COPY, layout]``: the decoder must redraw a 16x16
              two-colour layout; the only spatial route is the synchronizer.
* ``story`` - three frames of a layout, one cell flipped per frame.
* ``blobs`` - 8x8 images with two Gaussian blobs, for decoder-only diffusion.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .imgdec import DecoderSync, Denoiser, DenoiserConfig, NoiseSchedule, nip_loss, sample
from .mmllm import LLMConfig
from .numcore import make_rng
from .pipeline import (
    Batch,
    MMInterleaved,
    ModelConfig,
    TrainConfig,
    condition_tokens,
    eligible_images,
    make_batch,
    make_optimizer,
    train_step,
)
from .sequence import Image, PackedSequence, Text, build

COPY_TOKEN = 1
COLORS = (0.15, 0.85)

Sample = tuple[PackedSequence, torch.Tensor]


def layout(rng, size: int = 16, cells: int = 4) -> np.ndarray:
    bits = rng.integers(0, 2, size=(cells, cells))
    img = np.where(bits == 1, COLORS[1], COLORS[0])
    rep = size // cells
    return np.kron(img, np.ones((rep, rep)))[..., None].astype(np.float32)


def class_patterns(n_classes: int = 8, size: int = 16) -> list[np.ndarray]:
    rng = make_rng(1234)
    out, seen = [], set()
    while len(out) < n_classes:
        img = layout(rng, size)
        key = img.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(img)
    return out


def lm_corpus(n: int = 64, seed: int = 0, n_visual: int = 8, n_classes: int = 8, size: int = 16) -> list[Sample]:
    rng = make_rng(seed)
    pats = class_patterns(n_classes, size)
    out = []
    for _ in range(n):
        a, b = rng.integers(0, n_classes, size=2)
        imgs = [pats[a], pats[b]]
        imgs = [np.clip(x + rng.normal(0, 0.03, x.shape), 0, 1).astype(np.float32) for x in imgs]
        els = [Image(0), Text([10 + a, 20 + a]), Image(1), Text([10 + b, 20 + b])]
        out.append((build(els, n_visual), torch.from_numpy(np.stack(imgs))))
    return out


def copy_corpus(n: int, seed: int = 0, n_visual: int = 8, size: int = 16) -> list[Sample]:
    rng = make_rng(seed)
    out = []
    for _ in range(n):
        img = layout(rng, size)
        seq = build([Image(0), Text([COPY_TOKEN]), Image(1)], n_visual)
        out.append((seq, torch.from_numpy(np.stack([img, img]))))
    return out


def story_corpus(n: int, seed: int = 0, n_visual: int = 8, size: int = 16, frames: int = 3) -> list[Sample]:
    rng = make_rng(seed)
    out = []
    for _ in range(n):
        img = layout(rng, size)
        imgs, els = [], []
        cell = size // 4
        for f in range(frames):
            if f:
                img = img.copy()
                r, c = rng.integers(0, 4, size=2)
                block = img[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell]
                block[...] = COLORS[0] + COLORS[1] - block
            imgs.append(img)
            els += [Image(f), Text([2, 40 + f])]
        out.append((build(els, n_visual), torch.from_numpy(np.stack(imgs))))
    return out


def blobs(n: int, seed: int = 0, size: int = 8, sigma: float = 1.2) -> torch.Tensor:
    """(n, size, size, 1) images in [0, 1], each the max of two Gaussian bumps."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((n, size, size, 1), dtype=np.float32)
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(2):
            cy, cx = rng.uniform(1.5, size - 2.5, size=2)
            img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        out[i, ..., 0] = img
    return torch.from_numpy(out)


CORPORA: dict[str, Callable[..., list[Sample]]] = {"lm": lm_corpus, "copy": copy_corpus, "story": story_corpus}


# ------------------------------------------------------------------ presets


def toy_model_config(task: str, mmfs_decoder: bool = True, mmfs_llm: bool = True) -> ModelConfig:
    if task == "lm":
        llm = LLMConfig(d_model=64, n_layers=2, n_heads=4, text_vocab=64, mmfs_every=2, max_ctx=64, use_mmfs=mmfs_llm)
        dec = DenoiserConfig(base=16, depth=2, use_mmfs=mmfs_decoder)
        return ModelConfig(n_visual=8, visual_depth=1, cond_tokens=16, llm=llm, dec=dec)
    llm = LLMConfig(d_model=64, n_layers=2, n_heads=4, text_vocab=64, mmfs_every=2, max_ctx=96, use_mmfs=mmfs_llm)
    dec = DenoiserConfig(base=32, depth=2, use_mmfs=mmfs_decoder)
    return ModelConfig(n_visual=8, visual_depth=1, cond_tokens=16, llm=llm, dec=dec)


def toy_train_config(task: str, seed: int = 0) -> TrainConfig:
    if task == "lm":
        return TrainConfig(lam=0.0, lr=3e-3, lr_decoder=3e-3, steps=500, batch_size=16, dropout=0.1, seed=seed)
    return TrainConfig(lam=10.0, lr=1e-3, lr_decoder=2e-3, steps=600, batch_size=16, dropout=0.1, seed=seed)


# ------------------------------------------------------------------ loops


@dataclass
class TrainResult:
    history: list[dict]
    model: MMInterleaved
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator


def train(
    model: MMInterleaved,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    steps: int | None = None,
    log=None,
    max_len: int | None = None,
    optimizer=None,
    rng=None,
    start_step: int = 0,
) -> TrainResult:
    """Minibatch training on ``samples``; ``log`` receives one JSON line per step."""
    rng = rng if rng is not None else make_rng(cfg.seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    steps = cfg.steps if steps is None else steps
    history = []
    for step in range(start_step, start_step + steps):
        idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)), replace=False)
        batch = make_batch([samples[i] for i in idx], max_len)
        t0 = time.perf_counter()
        rec = train_step(model, batch, optimizer, cfg, rng)
        rec = {"step": step, **rec, "wall_ms": (time.perf_counter() - t0) * 1e3}
        history.append(rec)
        if log is not None:
            log.write(json.dumps(rec) + "\n")
    return TrainResult(history, model, optimizer, rng)


@torch.no_grad()
def reconstruct(model: MMInterleaved, samples: Sequence[Sample], guidance: float = 1.0, seed: int = 0, steps=None):
    """Sample every non-initial image from its context; returns (generated, targets) in [0, 1]."""
    model.eval()
    batch = make_batch(list(samples))
    levels, visual = model.tokenize(batch.images)
    _, hidden, _ = model.llm(batch.contexts, visual, levels, batch.offsets)
    items = eligible_images(batch)
    cond = condition_tokens(model, hidden, batch, items)
    sync = DecoderSync.from_lists(
        [[batch.offsets[b] + j for j in vis] for b, _, _, vis in items], levels, model.cfg.llm.max_images
    )
    x = sample(model.decoder, cond, sync, model.schedule, guidance, steps, make_rng(seed))
    rows = [batch.offsets[b] + i for b, i, _, _ in items]
    return ((x + 1) / 2).clamp(0, 1), batch.images[rows].to(x.dtype)


def reconstruction_mse(model, samples, guidance: float = 1.0, seed: int = 0, steps=None) -> float:
    gen, tgt = reconstruct(model, samples, guidance, seed, steps)
    return float(((gen - tgt) ** 2).mean())


def ablation_arm(
    task: str = "copy",
    seed: int = 0,
    steps: int = 600,
    n_train: int = 256,
    n_eval: int = 32,
    mmfs_decoder: bool = True,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> dict:
    """Train one arm (decoder with or without the synchronizer) and report reconstruction MSE."""
    mcfg = model_cfg or toy_model_config(task, mmfs_decoder=mmfs_decoder)
    tcfg = train_cfg or toy_train_config(task, seed)
    make = CORPORA[task]
    model = MMInterleaved(mcfg, seed=seed)
    t0 = time.perf_counter()
    res = train(model, make(n_train, seed=seed, n_visual=mcfg.n_visual), tcfg, steps=steps)
    mse = reconstruction_mse(model, make(n_eval, seed=10_000 + seed, n_visual=mcfg.n_visual), seed=seed)
    return {
        "task": task,
        "seed": seed,
        "mmfs_decoder": mcfg.dec.use_mmfs,
        "steps": steps,
        "final_nip": float(np.mean([h["nip"] for h in res.history[-50:]])),
        "recon_mse": mse,
        "seconds": time.perf_counter() - t0,
    }


def copy_ablation(seed: int, steps: int = 600, n_train: int = 256, n_eval: int = 32, mmfs_decoder=True) -> dict:
    """One arm of the layout-copy task."""
    return ablation_arm("copy", seed, steps, n_train, n_eval, mmfs_decoder)


# ------------------------------------------------------------- blob diffusion


def blob_denoiser(seed: int = 0) -> Denoiser:
    cfg = DenoiserConfig(image_size=8, channels=1, base=16, depth=2, cond_tokens=4, cond_dim=16, use_mmfs=False)
    return Denoiser(cfg, make_rng(seed))


def train_blobs(steps: int = 400, seed: int = 0, batch: int = 64, lr: float = 2e-3, n_data: int = 512):
    """Decoder-only diffusion on blob images with the null condition; returns (model, losses)."""
    model = blob_denoiser(seed)
    data = blobs(n_data, seed) * 2 - 1
    schedule = NoiseSchedule()
    rng = make_rng(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.995))
    losses = []
    for _ in range(steps):
        idx = rng.choice(n_data, size=batch, replace=False)
        loss = nip_loss(model, data[idx], model.null(batch), None, schedule, rng)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return model, losses


def window_means(values: Sequence[float], window: int = 100) -> list[float]:
    n = len(values) // window
    return [float(np.mean(values[i * window : (i + 1) * window])) for i in range(n)]
