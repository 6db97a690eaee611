"""``mminterleaved`` command line: selftest, train, generate, bench, ablate.

Exit codes: 0 success, 1 test failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import bench, selftest
from .config import ENV_VAR, ConfigError, RunConfig, parse_pairs, resolve, write_config
from .numcore import make_rng
from .pipeline import (
    CheckpointError,
    FormatError,
    MMInterleaved,
    ModelConfig,
    SamplerConfig,
    generate,
    load,
    make_optimizer,
    read_checkpoint,
    save,
)
from .pyramid import write_pnm
from .schemas import validate_csv, validate_json
from .sequence import Image, Text, parse
from .tasks import CORPORA, ablation_arm, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
ABLATION_HEADER = ["task", "seed", "mmfs_decoder", "steps", "final_nip", "recon_mse", "seconds"]


def _emit(obj, schema: str | None = None) -> None:
    if schema:
        validate_json(obj, schema)
    print(json.dumps(obj, indent=2))


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ rng state


def rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state

    def conv(v):
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(st)


def rng_from_state(state: dict) -> np.random.Generator:
    gen = make_rng(0)
    st = json.loads(json.dumps(state))
    st["state"] = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    gen.bit_generator.state = st
    return gen


# ------------------------------------------------------------------ commands


def cmd_selftest(args) -> int:
    summary = selftest.run(args.filter, args.inject or ())
    _emit(summary, "selftest")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def cmd_train(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    tcfg = rc.train_config()
    if rc.resume:
        header, _ = read_checkpoint(rc.resume)
        model = MMInterleaved(ModelConfig.from_dict(header["config"]), seed=rc.seed)
        optimizer = make_optimizer(model, tcfg)
        load(rc.resume, model, optimizer)
        extra = header.get("extra", {})
        start = int(extra.get("step", 0))
        rng = rng_from_state(extra["rng"]) if "rng" in extra else make_rng(rc.seed)
        mode = "a"
    else:
        model = MMInterleaved(rc.model_config(), seed=rc.seed)
        optimizer, start, rng, mode = None, 0, make_rng(rc.seed), "w"
    samples = CORPORA[rc.task](rc.n_train, seed=rc.seed, n_visual=model.cfg.n_visual)
    log_path = out / "train.jsonl"
    with open(log_path, mode) as log:
        res = train(
            model, samples, tcfg, steps=max(tcfg.steps - start, 0), log=log,
            optimizer=optimizer, rng=rng, start_step=start,
        )
    ckpt = Path(rc.checkpoint) if rc.checkpoint else out / "model.ckpt"
    save(ckpt, model, res.optimizer, extra={"step": max(tcfg.steps, start), "rng": rng_state(res.rng), "task": rc.task})
    write_config(out / "run.cfg", rc)
    last = res.history[-1] if res.history else {"ntp": float("nan"), "nip": float("nan"), "total": float("nan")}
    return {
        "task": rc.task,
        "seed": rc.seed,
        "steps": max(tcfg.steps, start),
        "start_step": start,
        "final": {k: last[k] for k in ("ntp", "nip", "total")},
        "checkpoint": str(ckpt),
        "log": str(log_path),
    }


def _element_json(el, names: dict[int, str]) -> dict:
    if isinstance(el, Text):
        return {"text": list(el.tokens)}
    return {"image": names[el.image_id]}


def _write_image(path: Path, img: torch.Tensor) -> None:
    arr = img.detach().cpu().numpy()
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    write_pnm(path, arr)


def cmd_generate(rc: RunConfig) -> dict:
    if not rc.checkpoint:
        raise ConfigError("generate needs checkpoint = <path>")
    model, header = load(rc.checkpoint)
    task = header.get("extra", {}).get("task", rc.task)
    seq, imgs = CORPORA[task](1, seed=20_000 + rc.seed, n_visual=model.cfg.n_visual)[0]
    els = parse(seq)
    last = max(i for i, e in enumerate(els) if isinstance(e, Image))
    prompt = els[:last]
    prompt_images = {e.image_id: imgs[e.image_id] for e in prompt if isinstance(e, Image)}
    sampler = SamplerConfig(rc.temperature, rc.guidance, rc.sample_steps, rc.seed)
    gen = generate(model, prompt, prompt_images, rc.max_new, sampler)
    out = _out_dir(rc)
    names = {}
    for i, img in prompt_images.items():
        names[i] = f"prompt_{i}.ppm"
        _write_image(out / names[i], img)
    gen_names = {}
    for i, img in gen.images.items():
        gen_names[i] = f"generated_{i}.ppm"
        _write_image(out / gen_names[i], img)
    result = {
        "seed": rc.seed,
        "prompt": [_element_json(e, names) for e in prompt],
        "elements": [_element_json(e, gen_names) for e in gen.elements],
    }
    validate_json(result, "generation")
    (out / "generation.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def cmd_bench(rc: RunConfig, runtime: bool = False, repetitions: int = 5) -> dict:
    out = _out_dir(rc)
    rows = bench.sweep(bench.figure_grid())
    text = bench.to_csv(rows, bench.SWEEP_HEADER)
    validate_csv(text, "flops.csv")
    (out / "flops.csv").write_text(text)
    for nt in sorted({r["n_text"] for r in rows}):
        (out / f"flops_nt{nt}.svg").write_text(bench.sweep_chart(rows, nt))
    eff = bench.token_efficiency()
    validate_json(eff, "token_efficiency")
    (out / "token_efficiency.json").write_text(json.dumps(eff, indent=2) + "\n")
    summary = {"flops_csv": str(out / "flops.csv"), "rows": len(rows), **eff}
    if runtime:
        torch.manual_seed(rc.seed)
        mrows = bench.measure(bench.toy_runtime_scenarios(seed=rc.seed), repetitions)
        mtext = bench.to_csv(mrows, bench.MEASURE_HEADER)
        validate_csv(mtext, "runtime.csv")
        (out / "runtime.csv").write_text(mtext)
        series = {r["name"]: [(0.0, 0.0), (1.0, r["median_ms"])] for r in mrows}
        (out / "runtime.svg").write_text(
            bench.svg_lines(series, "Median LLM forward time", "", "milliseconds")
        )
        summary["runtime_csv"] = str(out / "runtime.csv")
        summary["runtime_ms"] = {r["name"]: r["median_ms"] for r in mrows}
    return summary


def _arm(job):
    task, seed, steps, n_train, with_mmfs, rc_dict = job
    rc = RunConfig(**{**rc_dict, "mmfs_decoder": with_mmfs, "seed": seed})
    return ablation_arm(
        task, seed, steps, n_train, mmfs_decoder=with_mmfs,
        model_cfg=rc.model_config(), train_cfg=rc.train_config(),
    )


def cmd_ablate(rc: RunConfig, seeds=(0, 1, 2), workers: int = 1, ratio: float = 0.5) -> dict:
    out = _out_dir(rc)
    steps = rc.train_config().steps
    rc_dict = {k: v for k, v in vars(rc).items()}
    jobs = [(rc.task, s, steps, rc.n_train, arm, rc_dict) for s in seeds for arm in (True, False)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_arm, jobs))
    else:
        results = [_arm(j) for j in jobs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_HEADER, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow({k: int(r[k]) if k == "mmfs_decoder" else r[k] for k in ABLATION_HEADER})
    validate_csv(buf.getvalue(), "ablation.csv")
    (out / "ablation.csv").write_text(buf.getvalue())
    per_seed = []
    for s in seeds:
        a = next(r for r in results if r["seed"] == s and r["mmfs_decoder"])
        b = next(r for r in results if r["seed"] == s and not r["mmfs_decoder"])
        per_seed.append({"seed": s, "mse_with": a["recon_mse"], "mse_without": b["recon_mse"],
                         "ratio": a["recon_mse"] / b["recon_mse"]})
    summary = {"task": rc.task, "steps": steps, "seeds": per_seed,
               "all_within": all(p["ratio"] <= ratio for p in per_seed)}
    validate_json(summary, "ablation")
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mminterleaved",
        description="Interleaved image-text generation toolkit: self-tests, toy training, generation, benchmarks.",
        epilog=f"Run configs are flat 'key = value' files; ${ENV_VAR} names a default file.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", help=f"run config file (default: ${ENV_VAR})")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="random seed")
        sp.add_argument("--out", help="output directory")
        if task:
            sp.add_argument("--task", choices=["lm", "copy", "story"])
            sp.add_argument("--steps", type=int, help="training steps")

    sp = sub.add_parser("selftest", help="run the invariant suites; JSON summary on stdout")
    sp.add_argument("--filter", help="comma-separated module names or suite ids")
    sp.add_argument("--inject", action="append", choices=selftest.FAULTS, help="inject a known fault")

    sp = sub.add_parser("train", help="train on a synthetic task; writes checkpoint and JSON-lines log")
    common(sp)
    sp.add_argument("--no-mmfs-decoder", action="store_true", help="ablation arm: decoder without synchronizer")
    sp.add_argument("--no-mmfs-llm", action="store_true", help="LLM without synchronizer")
    sp.add_argument("--resume", help="continue from a checkpoint written by train")
    sp.add_argument("--checkpoint", help="checkpoint output path (default OUT/model.ckpt)")

    sp = sub.add_parser("generate", help="continue a task prompt; writes generation.json and PPM images")
    common(sp, task=False)
    sp.add_argument("--checkpoint", help="checkpoint to load")
    sp.add_argument("--max-new", type=int)
    sp.add_argument("--temperature", type=float, help="0 = greedy")
    sp.add_argument("--guidance", type=float, help="classifier-free guidance scale")

    sp = sub.add_parser("bench", help="FLOPs sweep (CSV + SVG), token-efficiency summary, optional runtime")
    common(sp, task=False)
    sp.add_argument("--runtime", action="store_true", help="also time toy LLM forwards")
    sp.add_argument("--repetitions", type=int, default=5)

    sp = sub.add_parser("ablate", help="paired with/without-synchronizer training arms")
    common(sp)
    sp.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    return p


def _run_config(args) -> RunConfig:
    overrides = parse_pairs(args.set, "--set")
    direct = {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "task": getattr(args, "task", None),
        "steps": getattr(args, "steps", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "resume": getattr(args, "resume", None),
        "max_new": getattr(args, "max_new", None),
        "temperature": getattr(args, "temperature", None),
        "guidance": getattr(args, "guidance", None),
    }
    if getattr(args, "no_mmfs_decoder", False):
        direct["mmfs_decoder"] = False
    if getattr(args, "no_mmfs_llm", False):
        direct["mmfs_llm"] = False
    overrides.update({k: v for k, v in direct.items() if v is not None})
    return resolve(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        rc = _run_config(args)
        if args.command == "train":
            _emit(cmd_train(rc), "train_summary")
        elif args.command == "generate":
            _emit(cmd_generate(rc))
        elif args.command == "bench":
            _emit(cmd_bench(rc, args.runtime, args.repetitions))
        elif args.command == "ablate":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            _emit(cmd_ablate(rc, seeds, args.workers), "ablation")
        return EXIT_OK
    except (OSError, FormatError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
