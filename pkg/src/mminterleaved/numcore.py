"""Numeric substrate: dtype policy, seeded RNG, differentiable primitives and a
central-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. The primitives below are written out explicitly (no
``torch.nn.functional`` shortcuts) so their loop oracles stay easy to compare.

Random numbers come from numpy's ``Philox4x32-10`` counter-based generator.
Child streams are derived with ``Generator.spawn`` (SeedSequence spawning),
so every component gets an independent, reproducible stream from one seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class EmptyLossError(ValueError):
    """Raised when a loss has no contributing positions."""


class EvaluationError(RuntimeError):
    """Raised when a checked function produces a non-finite value."""


# --------------------------------------------------------------------------- rng


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x32-10 generator seeded through a SeedSequence."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=TRAIN_DTYPE) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(tuple(shape)) * std).to(dtype)


def uniform(rng: np.random.Generator, shape, low: float, high: float, dtype=TRAIN_DTYPE) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, tuple(shape))).to(dtype)


# -------------------------------------------------------------------- primitives


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """y = x @ W.T + b over the trailing axis of ``x``."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: x[..., {x.shape[-1]}] incompatible with W{tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {tuple(b.shape)} does not match W{tuple(W.shape)}")
    y = torch.matmul(x, W.transpose(0, 1))
    return y if b is None else y + b


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Max-shifted softmax over the trailing axis."""
    if x.dim() == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def layer_norm(x: torch.Tensor, scale: torch.Tensor, offset: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * scale + offset


def cross_entropy(logits: torch.Tensor, targets, mask=None) -> torch.Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions.

    ``logits`` is (T, V); ``targets`` and ``mask`` are length-T sequences.
    """
    if logits.dim() != 2:
        raise DimensionError(f"cross_entropy expects (T, V) logits, got {tuple(logits.shape)}")
    T, V = logits.shape
    targets = torch.as_tensor(targets, dtype=torch.long)
    mask = torch.ones(T, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
    if targets.shape != (T,) or mask.shape != (T,):
        raise DimensionError("targets/mask length must match logits rows")
    n = int(mask.sum())
    if n == 0:
        raise EmptyLossError("all positions are masked")
    safe = torch.where(mask, targets, torch.zeros_like(targets))
    if int(safe.min()) < 0 or int(safe.max()) >= V:
        raise DimensionError(f"target ids must lie in [0, {V})")
    picked = log_softmax(logits).gather(1, safe[:, None])[:, 0]
    return -(picked * mask.to(logits.dtype)).sum() / n


# --------------------------------------------------------------------- gradcheck


@dataclass
class GradReport:
    max_rel: dict[str, float] = field(default_factory=dict)
    max_abs: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_rel.values())

    def worst(self) -> tuple[str, float]:
        if not self.max_rel:
            return "", 0.0
        name = max(self.max_rel, key=self.max_rel.get)
        return name, self.max_rel[name]

    def __str__(self) -> str:
        name, err = self.worst()
        return f"GradReport(passed={self.passed}, tol={self.tol:g}, worst={name}:{err:.3g}, n={len(self.max_rel)})"


def gradcheck(
    f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int = 64,
    scale_floor: float = 1e-4,
    seed: int = 0,
) -> GradReport:
    """Compare autograd gradients of scalar ``f(params)`` with central differences.

    The tensors in ``params`` are perturbed in place (and restored), so ``f``
    may either read them from its argument or close over them, e.g. a module's
    own parameters.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, scale_floor)``.
    Tensors with more than ``max_coords`` entries are checked on a seeded
    random subset of ``max_coords`` coordinates.
    """
    leaves = dict(params)
    for k, v in leaves.items():
        if v.dtype != CHECK_DTYPE:
            raise TypeError(f"gradcheck requires float64 parameters ({k} is {v.dtype})")
        if not v.requires_grad:
            v.requires_grad_(True)
    out = f(leaves)
    if out.numel() != 1:
        raise DimensionError("gradcheck needs a scalar-valued function")
    if not torch.isfinite(out):
        raise EvaluationError("function value is not finite")
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    analytic = {
        k: (g if g is not None else torch.zeros_like(v)).detach()
        for (k, v), g in zip(leaves.items(), grads)
    }

    rng = make_rng(seed)
    report = GradReport(tol=tol)
    with torch.no_grad():
        for k, v in leaves.items():
            flat = v.view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            a_flat = analytic[k].reshape(-1)
            worst_rel = worst_abs = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f(leaves))
                flat[i] = orig - eps
                fm = float(f(leaves))
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise EvaluationError(f"non-finite value while perturbing {k}[{i}]")
                num = (fp - fm) / (2 * eps)
                a = float(a_flat[i])
                diff = abs(a - num)
                worst_abs = max(worst_abs, diff)
                worst_rel = max(worst_rel, diff / max(abs(a), abs(num), scale_floor))
            report.max_rel[k] = worst_rel
            report.max_abs[k] = worst_abs
    return report


def module_params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())
