"""Pixel-space epsilon-prediction U-Net with condition cross-attention and a
synchronizer after every downsampling step.

Images are (B, H, W, ch) tensors scaled to [-1, 1]. Decoder queries are the
pixels of each downsampled feature map; their reference point is their own
normalized pixel center, and they see the pyramids of the images preceding
the one being generated.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .mmfs import MMFS
from .numcore import DimensionError, TRAIN_DTYPE, linear, randn, softmax
from .pyramid import ImagePyramid


class ScheduleError(ValueError):
    pass


class NoiseSchedule:
    """Linear beta schedule; ``t`` runs over 1..T.

    The default range is the usual 1e-4..0.02 (for T=1000) rescaled by 1000/T,
    which keeps abar_T near zero at T=100.
    """

    def __init__(self, T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2):
        if not (0 < beta_start <= beta_end < 1) or T < 1:
            raise ScheduleError("need 0 < beta_1 <= beta_T < 1 and T >= 1")
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def abar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"t must lie in [1, {self.T}]")
        return self.alpha_bar[t - 1]

    def respaced(self, steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Timesteps (descending order is up to the caller) and their alpha_bar."""
        if steps > self.T:
            raise ScheduleError(f"{steps} sampling steps exceed the schedule length {self.T}")
        if steps < 1:
            raise ScheduleError("need at least one sampling step")
        ts = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))
        return ts, self.alpha_bar[ts - 1]


def noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is an int or one per batch row."""
    if eps.shape != x0.shape:
        raise DimensionError("eps must match x0")
    ab = torch.as_tensor(schedule.abar(t), dtype=x0.dtype)
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


@dataclass
class DenoiserConfig:
    image_size: int = 16
    channels: int = 1
    base: int = 32
    depth: int = 2
    cond_tokens: int = 16
    cond_dim: int = 128
    feat_dim: int = 128
    n_levels: int = 3
    n_points: int = 4
    max_images: int = 6
    use_mmfs: bool = True
    groups: int = 8

    def __post_init__(self):
        if self.image_size % (2 ** self.depth):
            raise ValueError("image size must be divisible by 2^depth")

    def stage_channels(self) -> list[int]:
        return [self.base * 2 ** min(s, 1) for s in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Conv(nn.Module):
    def __init__(self, cin, cout, rng, dtype, k=3, stride=1, zero=False):
        super().__init__()
        fan = cin * k * k
        w = torch.zeros(cout, cin, k, k, dtype=dtype) if zero else randn(rng, (cout, cin, k, k), fan ** -0.5, dtype)
        self.w = nn.Parameter(w)
        self.b = nn.Parameter(torch.zeros(cout, dtype=dtype))
        self.stride, self.pad = stride, k // 2

    def forward(self, x):
        return F.conv2d(x, self.w, self.b, stride=self.stride, padding=self.pad)


class Norm(nn.Module):
    def __init__(self, c, groups, dtype):
        super().__init__()
        self.groups = math.gcd(groups, c)
        self.g = nn.Parameter(torch.ones(c, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(c, dtype=dtype))

    def forward(self, x):
        return F.group_norm(x, self.groups, self.g, self.b, eps=1e-5)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb, groups, rng, dtype):
        super().__init__()
        self.n1 = Norm(cin, groups, dtype)
        self.c1 = Conv(cin, cout, rng, dtype)
        self.t_w = nn.Parameter(randn(rng, (cout, temb), temb ** -0.5, dtype))
        self.t_b = nn.Parameter(torch.zeros(cout, dtype=dtype))
        self.n2 = Norm(cout, groups, dtype)
        self.c2 = Conv(cout, cout, rng, dtype)
        self.skip = Conv(cin, cout, rng, dtype, k=1) if cin != cout else None

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + linear(F.silu(temb), self.t_w, self.t_b)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + (x if self.skip is None else self.skip(x))


class CondAttn(nn.Module):
    """Pixels attend to the condition tokens (single head)."""

    def __init__(self, c, cond_dim, groups, rng, dtype):
        super().__init__()
        self.norm = Norm(c, groups, dtype)
        self.w_q = nn.Parameter(randn(rng, (c, c), c ** -0.5, dtype))
        self.w_k = nn.Parameter(randn(rng, (c, cond_dim), cond_dim ** -0.5, dtype))
        self.w_v = nn.Parameter(randn(rng, (c, cond_dim), cond_dim ** -0.5, dtype))
        # zero-initialised output: the block starts as the identity
        self.w_o = nn.Parameter(torch.zeros(c, c, dtype=dtype))
        self.b_o = nn.Parameter(torch.zeros(c, dtype=dtype))

    def forward(self, x, cond):
        B, C, H, W = x.shape
        h = self.norm(x).permute(0, 2, 3, 1).reshape(B, H * W, C)
        q = linear(h, self.w_q)
        k = linear(cond, self.w_k)
        v = linear(cond, self.w_v)
        att = softmax(torch.matmul(q, k.transpose(1, 2)) / math.sqrt(C))
        out = linear(torch.matmul(att, v), self.w_o, self.b_o)
        return x + out.reshape(B, H, W, C).permute(0, 3, 1, 2)


@dataclass
class DecoderSync:
    """Per generated image: bank rows of visible images by recency rank."""

    img_idx: torch.Tensor  # (B, M)
    valid: torch.Tensor  # (B, M) bool
    bank: list[torch.Tensor]  # per level (N_img, H_l, W_l, C)

    @staticmethod
    def from_lists(visible: Sequence[Sequence[int]], bank, max_images: int) -> "DecoderSync | None":
        """``visible[b]`` lists bank rows in stream order; the most recent come first after ranking."""
        ranked = [list(reversed(list(v)))[:max_images] for v in visible]
        M = max((len(r) for r in ranked), default=0)
        if M == 0 or not bank:
            return None
        idx = torch.zeros(len(ranked), M, dtype=torch.long)
        valid = torch.zeros(len(ranked), M, dtype=torch.bool)
        for b, r in enumerate(ranked):
            idx[b, : len(r)] = torch.tensor(r, dtype=torch.long)
            valid[b, : len(r)] = True
        return DecoderSync(idx, valid, list(bank))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        if rng is None:
            raise ValueError("Denoiser needs an rng for initialisation")
        self.cfg = cfg
        g, temb = cfg.groups, 4 * cfg.base
        chans = cfg.stage_channels()
        self.t_w1 = nn.Parameter(randn(rng, (temb, cfg.base), cfg.base ** -0.5, dtype))
        self.t_b1 = nn.Parameter(torch.zeros(temb, dtype=dtype))
        self.t_w2 = nn.Parameter(randn(rng, (temb, temb), temb ** -0.5, dtype))
        self.t_b2 = nn.Parameter(torch.zeros(temb, dtype=dtype))
        self.null_cond = nn.Parameter(randn(rng, (cfg.cond_tokens, cfg.cond_dim), 0.02, dtype))
        self.conv_in = Conv(cfg.channels, cfg.base, rng, dtype)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.down_conv = nn.ModuleList()
        self.down_mmfs = nn.ModuleList()
        cin = cfg.base
        for c in chans:
            self.down_res.append(ResBlock(cin, c, temb, g, rng, dtype))
            self.down_attn.append(CondAttn(c, cfg.cond_dim, g, rng, dtype))
            self.down_conv.append(Conv(c, c, rng, dtype, stride=2))
            if cfg.use_mmfs:
                self.down_mmfs.append(
                    MMFS(c, cfg.feat_dim, cfg.n_levels, cfg.n_points, cfg.max_images, 1, "decoder", rng, dtype)
                )
            cin = c
        self.mid = ResBlock(cin, cin, temb, g, rng, dtype)
        self.up_conv = nn.ModuleList()
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for c in reversed(chans):
            self.up_conv.append(Conv(cin, cin, rng, dtype))
            self.up_res.append(ResBlock(cin + c, c, temb, g, rng, dtype))
            self.up_attn.append(CondAttn(c, cfg.cond_dim, g, rng, dtype))
            cin = c
        self.out_norm = Norm(cin, g, dtype)
        self.conv_out = Conv(cin, cfg.channels, rng, dtype)
        self.mmfs_enabled = True

    @property
    def dtype(self):
        return self.t_w1.dtype

    def null(self, batch: int) -> torch.Tensor:
        return self.null_cond[None].expand(batch, -1, -1)

    def _sync(self, h, sync: DecoderSync, mmfs: MMFS):
        B, C, H, W = h.shape
        ys = (torch.arange(H, dtype=h.dtype) + 0.5) / H
        xs = (torch.arange(W, dtype=h.dtype) + 0.5) / W
        ref = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1).reshape(1, H * W, 2).expand(B, -1, -1)
        q = h.permute(0, 2, 3, 1).reshape(B * H * W, C)
        M = sync.img_idx.shape[1]
        idx = sync.img_idx[:, None, :].expand(B, H * W, M).reshape(B * H * W, M)
        valid = sync.valid[:, None, :].expand(B, H * W, M).reshape(B * H * W, M)
        out = mmfs(q, ref.reshape(B * H * W, 2), idx, valid, sync.bank)
        return out.reshape(B, H, W, C).permute(0, 3, 1, 2)

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor, sync: DecoderSync | None = None):
        """x_t (B, H, W, ch); t (B,) ints; cond (B, N_c, D_c) -> eps_hat (B, H, W, ch)."""
        B, H, W, ch = x_t.shape
        cfg = self.cfg
        if (H, W, ch) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(f"expected ({cfg.image_size}, {cfg.image_size}, {cfg.channels}) images")
        if cond.dim() != 3 or cond.shape[0] != B or cond.shape[2] != cfg.cond_dim:
            raise DimensionError(f"cond must be (B, N_c, {cfg.cond_dim})")
        t = torch.as_tensor(t).reshape(-1).expand(B)
        temb = timestep_embedding(t, cfg.base).to(self.dtype)
        temb = linear(F.silu(linear(temb, self.t_w1, self.t_b1)), self.t_w2, self.t_b2)
        h = self.conv_in(x_t.permute(0, 3, 1, 2))
        skips = []
        for s in range(cfg.depth):
            h = self.down_res[s](h, temb)
            h = self.down_attn[s](h, cond)
            skips.append(h)
            h = self.down_conv[s](h)
            if cfg.use_mmfs and self.mmfs_enabled and sync is not None:
                h = self._sync(h, sync, self.down_mmfs[s])
        h = self.mid(h, temb)
        for s in range(cfg.depth):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up_conv[s](h)
            h = torch.cat([h, skips.pop()], dim=1)
            h = self.up_res[s](h, temb)
            h = self.up_attn[s](h, cond)
        out = self.conv_out(F.silu(self.out_norm(h)))
        return out.permute(0, 2, 3, 1)


def denoise(model: Denoiser, x_t, t, cond, pyramids: Sequence[ImagePyramid] = ()) -> torch.Tensor:
    """Single image: x_t (H, W, ch), cond (N_c, D_c), pyramids of preceding images in stream order."""
    sync = None
    if pyramids:
        bank = [torch.stack([p.levels[l] for p in pyramids]) for l in range(pyramids[0].n_levels)]
        sync = DecoderSync.from_lists([list(range(len(pyramids)))], bank, model.cfg.max_images)
    return model(x_t[None], torch.tensor([int(t)]), cond[None], sync)[0]


def draw_noise(rng, shape, T: int, dtype=TRAIN_DTYPE):
    t = torch.from_numpy(rng.integers(1, T + 1, size=shape[0]))
    eps = torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)
    return t, eps


def nip_loss(
    model: Denoiser,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sync: DecoderSync | None,
    schedule: NoiseSchedule,
    rng=None,
    t=None,
    eps=None,
) -> torch.Tensor:
    """Mean squared error between drawn noise and its prediction (per element)."""
    if t is None or eps is None:
        t, eps = draw_noise(rng, x0.shape, schedule.T, x0.dtype)
    x_t = noise(x0, t.numpy(), eps, schedule)
    eps_hat = model(x_t, t, cond, sync)
    return ((eps - eps_hat) ** 2).mean()


@torch.no_grad()
def sample(
    model: Denoiser,
    cond: torch.Tensor | None,
    sync: DecoderSync | None,
    schedule: NoiseSchedule,
    guidance: float = 1.0,
    steps: int | None = None,
    rng=None,
    batch: int | None = None,
    trace: Callable[[int, torch.Tensor], None] | None = None,
    clip: bool = True,
) -> torch.Tensor:
    """Ancestral DDPM sampling with classifier-free guidance.

    ``cond=None`` samples unconditionally from the learned null condition.
    Returns (B, H, W, ch) images in [-1, 1] (clipped when ``clip``).
    """
    if guidance < 0:
        raise ValueError("guidance scale must be >= 0")
    steps = schedule.T if steps is None else steps
    ts, abars = schedule.respaced(steps)
    cfg = model.cfg
    B = cond.shape[0] if cond is not None else (batch or 1)
    dt = model.dtype
    x = torch.from_numpy(rng.standard_normal((B, cfg.image_size, cfg.image_size, cfg.channels))).to(dt)
    null = model.null(B)
    for j in range(len(ts) - 1, -1, -1):
        t = int(ts[j])
        ab = float(abars[j])
        ab_prev = float(abars[j - 1]) if j > 0 else 1.0
        beta = 1.0 - ab / ab_prev
        tt = torch.full((B,), t, dtype=torch.long)
        eps_u = model(x, tt, null, sync)
        if cond is None:
            eps = eps_u
        else:
            eps_c = model(x, tt, cond, sync)
            eps = eps_u + guidance * (eps_c - eps_u)
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if clip:
            x0 = x0.clamp(-1.0, 1.0)
        mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
        if j > 0:
            var = beta * (1 - ab_prev) / (1 - ab)
            z = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(dt)
            x = mean + math.sqrt(var) * z
        else:
            x = mean
        if trace is not None:
            trace(t, x)
    return x
