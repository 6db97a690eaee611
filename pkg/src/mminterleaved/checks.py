"""Reusable invariant checks shared by the self-test command and the test suite.

Each check returns the measured quantity (an error, a gap, a count); callers
decide the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .imgdec import DecoderSync, Denoiser, DenoiserConfig, NoiseSchedule, nip_loss
from .mmfs import MMFS, deform_attn, plan
from .mmllm import MMLLM, LLMConfig, ntp_loss
from .numcore import CHECK_DTYPE, GradReport, gradcheck, make_rng, randn
from .oracles import bilinear_loop, mmfs_loop
from .pyramid import ImagePyramid, bilinear_sample
from .sequence import Image, PackedSequence, Text, build, concat, visibility

LEVEL_SIDES = (2, 4, 8)

# ------------------------------------------------------------------ builders


def randomize_gates(module: torch.nn.Module, rng, scale: float = 0.3) -> None:
    """Give every zero-initialised synchronizer/attention output a random value."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("w_p", "b_p", "w_a", "b_a", "conv_w", "conv_b", "w_o", "b_o"):
                p.copy_(randn(rng, p.shape, scale, p.dtype))
            elif leaf == "alpha":
                p.fill_(0.7)


def random_pyramid(rng, n_levels: int, channels: int, dtype=CHECK_DTYPE, sides=LEVEL_SIDES) -> ImagePyramid:
    levels = []
    for _ in range(n_levels):
        h, w = (int(s) for s in rng.choice(sides, size=2))
        levels.append(randn(rng, (h, w, channels), 1.0, dtype))
    return ImagePyramid(levels, (0, 0))


@dataclass
class MMFSCase:
    params: MMFS
    pyramids: dict[int, ImagePyramid]
    f_q: torch.Tensor
    ref: tuple[float, float]
    visible: list[int]  # stream order


def random_mmfs_case(rng, M: int, L: int, K: int, C: int = 4, dtype=CHECK_DTYPE) -> MMFSCase:
    params = MMFS(C, C, L, K, max(M, 1), 1, "llm", rng, dtype)
    randomize_gates(params, rng, 0.4)
    ids = [int(i) for i in rng.permutation(10)[:M]]
    pyrs = {i: random_pyramid(rng, L, C, dtype) for i in ids}
    f_q = randn(rng, (C,), 1.0, dtype)
    ref = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=2))
    return MMFSCase(params, pyrs, f_q, ref, ids)


def mmfs_oracle_value(case: MMFSCase) -> np.ndarray:
    P = {k: v.detach().numpy() for k, v in case.params.named_parameters()}
    ranked = list(reversed(case.visible))
    levels = [[lv.numpy() for lv in case.pyramids[i].levels] for i in ranked]
    return mmfs_loop(
        case.f_q.numpy(), case.ref, levels, P["w_q"], P["b_q"], P["w_p"], P["b_p"],
        P["w_a"], P["b_a"], P["pos_embed"], case.params.n_points,
    )


def tiny_llm_config(use_mmfs: bool = True, **kw) -> LLMConfig:
    base = dict(
        d_model=8, n_layers=2, n_heads=2, text_vocab=12, mmfs_every=1, max_ctx=128,
        n_levels=2, n_points=2, max_images=3, use_mmfs=use_mmfs,
    )
    base.update(kw)
    return LLMConfig(**base)


def tiny_denoiser_config(use_mmfs: bool = True) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=8, channels=1, base=8, depth=1, cond_tokens=2, cond_dim=8, feat_dim=8,
        n_levels=2, n_points=2, max_images=2, use_mmfs=use_mmfs, groups=4,
    )


def random_bank(rng, n_images: int, C: int, sides=(4, 2), dtype=CHECK_DTYPE) -> list[torch.Tensor]:
    return [randn(rng, (n_images, s, s, C), 1.0, dtype) for s in sides]


def random_elements(rng, max_elems: int = 5, max_text: int = 3, text_vocab: int = 12, min_images: int = 1):
    n = int(rng.integers(1, max_elems + 1))
    kinds = list(rng.integers(0, 2, size=n))
    for i in range(min(min_images, n)):
        kinds[i] = 1
    rng.shuffle(kinds)
    els, img = [], 0
    for k in kinds:
        if k:
            els.append(Image(img))
            img += 1
        else:
            els.append(Text(rng.integers(0, text_vocab, size=int(rng.integers(1, max_text + 1)))))
    return els


def random_packed(rng, n_visual: int, n_samples: int, text_vocab: int = 12) -> PackedSequence:
    samples = [build(random_elements(rng, text_vocab=text_vocab), n_visual) for _ in range(n_samples)]
    return concat(samples)


# ------------------------------------------------------------------ checks


def bilinear_oracle_error(n: int = 200, seed: int = 0) -> float:
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n):
        h, w = (int(s) for s in rng.choice(LEVEL_SIDES, size=2))
        fmap = randn(rng, (h, w, 3), 1.0, CHECK_DTYPE)
        u, v = rng.uniform(-0.2, 1.2, size=2)
        got = bilinear_sample(fmap, (u, v)).numpy()
        worst = max(worst, float(np.abs(got - bilinear_loop(fmap.numpy(), u, v)).max()))
    return worst


def mmfs_oracle_error(n_configs: int = 200, seed: int = 0) -> tuple[float, int]:
    """Worst |deform_attn(plan) - loop oracle| over a grid of M, L, K; returns (error, configs)."""
    rng = make_rng(seed)
    grid = [(M, L, K) for M in (1, 2, 3) for L in (1, 3) for K in (1, 4)]
    worst = 0.0
    for i in range(n_configs):
        M, L, K = grid[i % len(grid)]
        case = random_mmfs_case(rng, M, L, K)
        got = deform_attn(case.pyramids, plan(case.f_q, case.ref, case.visible, case.params))
        worst = max(worst, float(np.abs(got.detach().numpy() - mmfs_oracle_value(case)).max()))
    return worst, n_configs


def attention_mass_error(n_queries: int = 10_000, seed: int = 0, dtype=torch.float32) -> float:
    """max |sum A - 1| over queries with random visibility masks and sharp logits."""
    rng = make_rng(seed)
    Mbar, C = 6, 8
    params = MMFS(C, C, 3, 4, Mbar, 1, "llm", rng, dtype)
    with torch.no_grad():
        params.w_a.copy_(randn(rng, params.w_a.shape, 3.0, dtype))
        params.b_a.copy_(randn(rng, params.b_a.shape, 3.0, dtype))
    f_q = randn(rng, (n_queries, C), 2.0, dtype)
    ref = torch.from_numpy(rng.uniform(0, 1, size=(n_queries, 2))).to(dtype)
    counts = torch.from_numpy(rng.integers(1, Mbar + 1, size=n_queries))
    valid = torch.arange(Mbar)[None, :] < counts[:, None]
    with torch.no_grad():
        _, A = params.plan_batch(f_q, ref, valid)
    return float((A.sum(dim=(2, 3, 4)) - 1).abs().max())


def mmfs_gradcheck(seed: int = 0, max_coords: int = 64) -> GradReport:
    """Synchronizer parameters, the query and every pyramid level."""
    rng = make_rng(seed)
    case = random_mmfs_case(rng, 2, 3, 4)
    leaves = {f"param.{k}": v for k, v in case.params.named_parameters()}
    leaves["f_q"] = case.f_q.requires_grad_(True)
    for i, p in case.pyramids.items():
        for l, lv in enumerate(p.levels):
            leaves[f"pyramid{i}.level{l}"] = lv.requires_grad_(True)

    def f(_):
        out = case.params.gate(case.f_q, deform_attn(case.pyramids, plan(case.f_q, case.ref, case.visible, case.params)))
        return (out * torch.linspace(-1, 1, out.numel(), dtype=out.dtype)).sum()

    return gradcheck(f, leaves, eps=1e-5, tol=1e-4, max_coords=max_coords, seed=seed)


def llm_gradcheck(seed: int = 0, max_coords: int = 64) -> GradReport:
    """LLM parameters, visual tokens and pyramid bank through the NTP loss."""
    rng = make_rng(seed)
    cfg = tiny_llm_config()
    model = MMLLM(cfg, rng, CHECK_DTYPE)
    randomize_gates(model, rng)
    seq = build([Image(0), Text([1, 2]), Image(1), Text([3])], 2)
    visual = randn(rng, (2, 2, cfg.d_model), 1.0, CHECK_DTYPE).requires_grad_(True)
    bank = [b.requires_grad_(True) for b in random_bank(rng, 2, cfg.d_model)]
    leaves = dict(model.named_parameters())
    leaves["visual"] = visual
    for l, b in enumerate(bank):
        leaves[f"bank{l}"] = b

    def f(_):
        logits, _, _ = model([seq], visual, bank, [0])
        return ntp_loss(logits[0], seq, cfg.vocab)

    return gradcheck(f, leaves, eps=1e-5, tol=1e-4, max_coords=max_coords, seed=seed)


def denoiser_gradcheck(seed: int = 0, max_coords: int = 64) -> GradReport:
    """Denoiser parameters, condition and pyramid bank through the NIP loss."""
    rng = make_rng(seed)
    cfg = tiny_denoiser_config()
    model = Denoiser(cfg, rng, CHECK_DTYPE)
    randomize_gates(model, rng)
    schedule = NoiseSchedule(T=10)
    x0 = torch.from_numpy(rng.uniform(-1, 1, size=(2, 8, 8, 1)))
    cond = randn(rng, (2, 2, 8), 1.0, CHECK_DTYPE).requires_grad_(True)
    bank = [b.requires_grad_(True) for b in random_bank(rng, 2, 8)]
    sync = DecoderSync.from_lists([[0], [0, 1]], bank, cfg.max_images)
    t = torch.tensor([3, 7])
    eps = torch.from_numpy(rng.standard_normal((2, 8, 8, 1)))
    leaves = dict(model.named_parameters())
    leaves["cond"] = cond
    for l, b in enumerate(bank):
        leaves[f"bank{l}"] = b

    def f(_):
        return nip_loss(model, x0, cond, sync, schedule, t=t, eps=eps)

    return gradcheck(f, leaves, eps=1e-5, tol=1e-4, max_coords=max_coords, seed=seed)


def llm_zero_init_gap(seed: int = 0, faults: frozenset = frozenset()) -> float:
    """max |LLM(with synchronizer at init) - LLM(without)| in 32-bit."""
    rng = make_rng(seed)
    cfg = tiny_llm_config()
    model = MMLLM(cfg, rng)
    if "alpha-init" in faults:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.endswith("alpha"):
                    p.fill_(1.0)
    plain = MMLLM(tiny_llm_config(use_mmfs=False), make_rng(seed + 1))
    plain.load_state_dict({k: v for k, v in model.state_dict().items() if ".mmfs." not in k})
    seq = random_packed(rng, 2, 2)
    n_img = len(seq.images)
    visual = randn(rng, (n_img, 2, cfg.d_model), 1.0, model.dtype)
    bank = random_bank(rng, n_img, cfg.d_model, dtype=model.dtype)
    with torch.no_grad():
        a, _, _ = model([seq], visual, bank, [0])
        b, _, _ = plain([seq], visual, None, [0])
    return float((a - b).abs().max())


def decoder_zero_init_gap(seed: int = 0, faults: frozenset = frozenset()) -> float:
    """max |denoiser(with synchronizer at init) - denoiser(without)| in 32-bit."""
    rng = make_rng(seed)
    cfg = tiny_denoiser_config()
    model = Denoiser(cfg, rng)
    if "conv-init" in faults:
        with torch.no_grad():
            for name, p in model.named_parameters():
                if name.endswith("conv_w"):
                    p.fill_(1.0)
    plain = Denoiser(tiny_denoiser_config(use_mmfs=False), make_rng(seed + 1))
    plain.load_state_dict({k: v for k, v in model.state_dict().items() if not k.startswith("down_mmfs.")})
    x = torch.from_numpy(rng.standard_normal((2, 8, 8, 1))).float()
    cond = randn(rng, (2, 2, 8), 1.0, model.dtype)
    bank = random_bank(rng, 2, 8, dtype=model.dtype)
    sync = DecoderSync.from_lists([[0], [0, 1]], bank, cfg.max_images)
    with torch.no_grad():
        a = model(x, torch.tensor([5, 50]), cond, sync)
        b = plain(x, torch.tensor([5, 50]), cond, None)
    return float((a - b).abs().max())


@dataclass
class CausalityReport:
    layouts: int = 0
    perturbations: int = 0
    leaks: int = 0  # outputs changed where the image is not visible
    dead: int = 0  # perturbation changed nothing at all (image ignored)


def causality_check(n_layouts: int = 100, seed: int = 0, dtype=torch.float32) -> CausalityReport:
    """Perturb each image of random packed layouts; outputs may change only where it is visible."""
    rng = make_rng(seed)
    cfg = tiny_llm_config()
    model = MMLLM(cfg, rng, dtype)
    randomize_gates(model, rng)
    rep = CausalityReport()
    for _ in range(n_layouts):
        seq = random_packed(rng, 2, int(rng.integers(1, 4)))
        n_img = len(seq.images)
        visual = randn(rng, (n_img, 2, cfg.d_model), 1.0, dtype)
        bank = random_bank(rng, n_img, cfg.d_model, dtype=dtype)
        with torch.no_grad():
            base, _, _ = model([seq], visual, bank, [0])
        vis = visibility(seq, cfg.own_image_visible)
        rep.layouts += 1
        for j in range(n_img):
            v2 = visual.clone()
            v2[j] += randn(rng, v2[j].shape, 1.0, dtype)
            b2 = [b.clone() for b in bank]
            for b in b2:
                b[j] += randn(rng, b[j].shape, 1.0, dtype)
            with torch.no_grad():
                out, _, _ = model([seq], v2, b2, [0])
            changed = (out[0] != base[0]).any(dim=-1)
            sees = torch.tensor([j in vis[p] for p in range(len(seq))])
            rep.perturbations += 1
            rep.leaks += int((changed & ~sees).sum())
            rep.dead += int(not bool(changed.any()))
    return rep
