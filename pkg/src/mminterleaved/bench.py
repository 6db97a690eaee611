"""Analytic FLOPs model and wall-time harness for visual-token efficiency.

Counting rules (multiply-accumulates, reported as 2 FLOPs each; softmax and
normalisation are ignored):

* self-attention, per layer: ``4*T*C^2`` (q/k/v/o projections) + ``2*T^2*C``
  (scores and weighted sum), ``T`` the full sequence length;
* FFN, per layer: ``8*T*C^2`` (4x expansion, two matrices);
* LM head: ``T*C*V``;
* synchronizer, per query in each synchronizer layer with ``M`` visible
  images: ``C^2`` (query projection) + ``M*(2K*C + L*K*C)`` (offset and
  weight projections per image) + ``M*L*K*5C`` (4 bilinear corners and the
  weighted sum per sampled point);
* dense cross-attention, per cross-attention layer: query and output
  projections ``2*T*C^2``, key/value projections over every pyramid position
  of every image ``2*N_i*P*C^2``, and scores + weighted sum over the ``M*P``
  visible keys ``2*T*M*P*C``.

``M`` is ``min(N_i, max_images)`` for every query, an upper bound that
treats every token as seeing the full visible window. The image encoder is
not part of these LLM-side counts.
"""

from __future__ import annotations

import csv
import io
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

COMPONENTS = ("self_attn", "ffn", "mmfs", "cross_attn", "head")
BASELINE_TOKENS = 32


@dataclass(frozen=True)
class CostScenario:
    d_model: int = 5120
    n_layers: int = 40
    n_heads: int = 40
    n_visual: int = 32
    n_images: int = 1
    n_text: int = 256
    vocab: int = 32000
    mmfs: bool = False
    dense_cross: bool = False
    max_images: int = 6
    n_levels: int = 3
    n_points: int = 4
    period: int = 4
    image_res: int = 224
    context: int = 2048
    name: str = ""

    def __post_init__(self):
        for f, v in asdict(self).items():
            if isinstance(v, int) and not isinstance(v, bool) and v < 0:
                raise ValueError(f"{f} must be >= 0, got {v}")
        if self.period < 1:
            raise ValueError("period must be >= 1")

    @property
    def seq_len(self) -> int:
        """BoS + EoS, each image as BoI + N_v slots, N_t text tokens per image."""
        return 2 + self.n_images * (1 + self.n_visual) + self.n_images * self.n_text

    @property
    def overflow(self) -> bool:
        return self.seq_len > self.context

    @property
    def pyramid_positions(self) -> int:
        """Feature positions per image over all levels (level i has side res / 2^(i+3))."""
        return sum((self.image_res >> (i + 3)) ** 2 for i in range(self.n_levels))

    @property
    def sync_layers(self) -> int:
        return self.n_layers // self.period

    @property
    def variant(self) -> str:
        if self.mmfs:
            return f"mmfs{self.n_visual}"
        if self.dense_cross:
            return f"dense{self.n_visual}"
        return f"tokens{self.n_visual}"


def count_macs(s: CostScenario) -> dict[str, int]:
    T, C, Ly = s.seq_len, s.d_model, s.n_layers
    M = min(s.n_images, s.max_images)
    L, K = s.n_levels, s.n_points
    out = dict.fromkeys(COMPONENTS, 0)
    out["self_attn"] = Ly * (4 * T * C * C + 2 * T * T * C)
    out["ffn"] = Ly * 8 * T * C * C
    out["head"] = T * C * s.vocab if Ly else 0
    if s.mmfs and M:
        per_query = C * C + M * (2 * K * C + L * K * C) + M * L * K * 5 * C
        out["mmfs"] = s.sync_layers * T * per_query
    if s.dense_cross and M:
        P = s.pyramid_positions
        per_layer = 2 * T * C * C + 2 * s.n_images * P * C * C + 2 * T * M * P * C
        out["cross_attn"] = s.sync_layers * per_layer
    return out


def count_flops(s: CostScenario) -> dict[str, float]:
    """GFLOPs per component (2 FLOPs per multiply-accumulate)."""
    return {k: 2 * v / 1e9 for k, v in count_macs(s).items()}


def total(breakdown: dict[str, float]) -> float:
    return sum(breakdown[k] for k in COMPONENTS)


# ------------------------------------------------------------------ presets


def large_preset(**overrides) -> CostScenario:
    """13B-scale LLM, one image followed by 256 text tokens."""
    return replace(CostScenario(), **overrides)


def token_efficiency(base: CostScenario | None = None) -> dict[str, float]:
    """256 tokens without synchronizer vs 32 tokens with it, plus its overhead."""
    base = base or large_preset()
    many = total(count_flops(replace(base, n_visual=256, mmfs=False, dense_cross=False)))
    few = count_flops(replace(base, n_visual=BASELINE_TOKENS, mmfs=True, dense_cross=False))
    plain = total(count_flops(replace(base, n_visual=BASELINE_TOKENS, mmfs=False, dense_cross=False)))
    return {
        "gflops_256": many,
        "gflops_32_mmfs": total(few),
        "gflops_32": plain,
        "ratio": many / total(few),
        "mmfs_overhead": few["mmfs"] / plain,
    }


VARIANTS = {
    "tokens256": dict(n_visual=256, mmfs=False, dense_cross=False),
    "mmfs32": dict(n_visual=32, mmfs=True, dense_cross=False),
    "dense32": dict(n_visual=32, mmfs=False, dense_cross=True),
}


def figure_grid(
    base: CostScenario | None = None,
    n_images: Iterable[int] = range(1, 9),
    n_text: Iterable[int] = (32, 128, 256),
) -> list[CostScenario]:
    base = base or large_preset()
    return [
        replace(base, name=v, n_images=ni, n_text=nt, **kw)
        for v, kw in VARIANTS.items()
        for nt in n_text
        for ni in n_images
    ]


# ------------------------------------------------------------------ sweep

SWEEP_HEADER = [
    "variant",
    "d_model",
    "n_layers",
    "n_visual",
    "n_images",
    "n_text",
    "use_mmfs",
    "use_dense",
    "seq_len",
    *COMPONENTS,
    "total",
    "delta_vs_32",
    "overflow",
]


def sweep(grid: Sequence[CostScenario]) -> list[dict]:
    """One row per scenario; delta is against the 32-token plain model of the same shape."""
    if not grid:
        raise ValueError("sweep needs at least one scenario")
    rows = []
    for s in grid:
        f = count_flops(s)
        base = replace(s, n_visual=BASELINE_TOKENS, mmfs=False, dense_cross=False)
        tot = total(f)
        rows.append(
            {
                "variant": s.name or s.variant,
                "d_model": s.d_model,
                "n_layers": s.n_layers,
                "n_visual": s.n_visual,
                "n_images": s.n_images,
                "n_text": s.n_text,
                "use_mmfs": int(s.mmfs),
                "use_dense": int(s.dense_cross),
                "seq_len": s.seq_len,
                **f,
                "total": tot,
                "delta_vs_32": tot - total(count_flops(base)),
                "overflow": int(s.overflow),
            }
        )
    return rows


def to_csv(rows: Sequence[dict], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in header})
    return buf.getvalue()


# ------------------------------------------------------------------ runtime

MEASURE_HEADER = ["name", "repetitions", "median_ms", "min_ms", "max_ms", "peak_rss_kb"]


@dataclass
class RuntimeScenario:
    name: str
    run: Callable[[], object]
    meta: dict = field(default_factory=dict)


def measure(scenarios: Sequence[RuntimeScenario], repetitions: int = 5, warmup: int = 1) -> list[dict]:
    """Serial timing; warmup calls are excluded and the median is reported.

    Memory is the process resident-set high-water mark after the scenario,
    which is monotone over the process lifetime.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for sc in scenarios:
        for _ in range(warmup):
            sc.run()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            sc.run()
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append(
            {
                "name": sc.name,
                "repetitions": repetitions,
                "median_ms": statistics.median(times),
                "min_ms": min(times),
                "max_ms": max(times),
                "peak_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
            }
        )
    return rows


def toy_runtime_scenarios(n_images: int = 2, n_text: int = 16, d_model: int = 128, n_layers: int = 4, seed: int = 0):
    """LLM forward passes: 32 tokens + synchronizer vs 256 tokens without it."""
    import torch

    from .mmllm import MMLLM, LLMConfig
    from .numcore import make_rng, randn
    from .sequence import Image, Text, build

    out = []
    for name, n_vis, use in (("mmfs32", 32, True), ("tokens256", 256, False)):
        els = []
        for i in range(n_images):
            els += [Image(i), Text(list(range(n_text)))]
        seq = build(els, n_vis)
        cfg = LLMConfig(d_model=d_model, n_layers=n_layers, max_ctx=len(seq), use_mmfs=use, mmfs_every=2)
        rng = make_rng(seed)
        model = MMLLM(cfg, rng).eval()
        visual = randn(rng, (n_images, n_vis, d_model), 1.0, model.dtype)
        bank = [randn(rng, (n_images, s, s, d_model), 1.0, model.dtype) for s in (4, 2, 1)] if use else None

        def run(model=model, seq=seq, visual=visual, bank=bank):
            with torch.no_grad():
                model([seq], visual, bank, [0])

        out.append(RuntimeScenario(name, run, {"n_visual": n_vis, "mmfs": use, "seq_len": len(seq)}))
    return out


# ------------------------------------------------------------------ charts


def svg_lines(
    series: dict[str, Sequence[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 560,
    height: int = 360,
) -> str:
    """Minimal line chart: labelled axes, one polyline and legend entry per series."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 70, 20, 40, 50
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(0.0, min(p[1] for p in pts)), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return left + (x - x0) / (x1 - x0) * (width - left - right)

    def sy(y):
        return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom)

    el = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{sy(y0)}" x2="{width - right}" y2="{sy(y0)}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="16" y="{height / 2}" text-anchor="middle" transform="rotate(-90 16 {height / 2})">{ylabel}</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        el.append(f'<text x="{sx(xv):.1f}" y="{height - bottom + 16}" text-anchor="middle">{xv:.3g}</text>')
        el.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = palette[i % len(palette)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(s))
        el.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        ly = top + 14 * i
        el.append(f'<line x1="{left + 10}" y1="{ly}" x2="{left + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        el.append(f'<text x="{left + 34}" y="{ly + 4}">{name}</text>')
    el.append("</svg>")
    return "\n".join(el) + "\n"


def sweep_chart(rows: Sequence[dict], n_text: int) -> str:
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        if r["n_text"] == n_text:
            series.setdefault(r["variant"], []).append((r["n_images"], r["delta_vs_32"]))
    return svg_lines(
        series,
        title=f"Additional GFLOPs over 32 visual tokens (N_t={n_text})",
        xlabel="images per sequence (N_i)",
        ylabel="additional GFLOPs",
    )
