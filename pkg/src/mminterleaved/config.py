"""Flat ``key = value`` run configuration shared by every CLI subcommand.

Blank lines and ``#`` comments are ignored. Unset keys fall back to the
task preset in :mod:`mminterleaved.tasks`. Precedence: preset < file <
command-line flags. ``MMIV_CONFIG`` names a default file.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .pipeline import ModelConfig, TrainConfig
from .tasks import toy_model_config, toy_train_config

ENV_VAR = "MMIV_CONFIG"
TASKS = ("lm", "copy", "story")


class ConfigError(ValueError):
    """Bad key or value in a run configuration."""


@dataclass
class RunConfig:
    task: str = "copy"
    seed: int = 0
    # training
    steps: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    lr_decoder: float | None = None
    lam: float | None = None
    dropout: float | None = None
    clip_grad: float | None = None
    n_train: int = 256
    # model
    d_model: int | None = None
    n_layers: int | None = None
    n_heads: int | None = None
    text_vocab: int | None = None
    n_visual: int | None = None
    cond_tokens: int | None = None
    mmfs_llm: bool = True
    mmfs_decoder: bool = True
    mmfs_every: int | None = None
    n_levels: int | None = None
    n_points: int | None = None
    max_images: int | None = None
    # diffusion schedule and sampling
    T: int | None = None
    beta_start: float | None = None
    beta_end: float | None = None
    guidance: float = 1.0
    sample_steps: int | None = None
    temperature: float = 0.0
    max_new: int = 16
    # paths
    out: str = "runs/out"
    checkpoint: str | None = None
    resume: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")

    # ------------------------------------------------------------ building

    def model_config(self) -> ModelConfig:
        cfg = toy_model_config(self.task, mmfs_decoder=self.mmfs_decoder, mmfs_llm=self.mmfs_llm)
        llm_keys = ("d_model", "n_layers", "n_heads", "text_vocab", "mmfs_every", "n_levels", "n_points", "max_images")
        llm = dataclasses.replace(cfg.llm, **{k: getattr(self, k) for k in llm_keys if getattr(self, k) is not None})
        top = {k: getattr(self, k) for k in ("n_visual", "cond_tokens", "T", "beta_start", "beta_end") if getattr(self, k) is not None}
        return dataclasses.replace(cfg, llm=llm, **top)

    def train_config(self) -> TrainConfig:
        cfg = toy_train_config(self.task, self.seed)
        keys = ("steps", "batch_size", "lr", "lr_decoder", "lam", "dropout", "clip_grad")
        return dataclasses.replace(cfg, **{k: getattr(self, k) for k in keys if getattr(self, k) is not None})


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _field_types()[key]
    raw = raw.strip()
    if raw.lower() in ("none", "null", "") and "None" in typ:
        return None
    try:
        if typ.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw


def parse_pairs(pairs, source: str = "<args>") -> dict:
    out = {}
    names = _field_types()
    for lineno, line in enumerate(pairs, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def read_config(path) -> dict:
    text = Path(path).read_text()
    return parse_pairs(text.splitlines(), str(path))


def write_config(path, cfg: RunConfig) -> None:
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge preset defaults, the config file (or ``$MMIV_CONFIG``) and overrides."""
    values = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        values.update(read_config(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
