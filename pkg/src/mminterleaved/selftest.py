"""Registry of fast invariant suites run by ``mminterleaved selftest``."""

from __future__ import annotations

import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

from . import bench, checks
from .numcore import make_rng
from .oracles import ffn_macs_loop, self_attn_macs_loop
from .sequence import Vocab, build, parse, validate

FAULTS = ("alpha-init", "conv-init")


@dataclass(frozen=True)
class Suite:
    module: str
    name: str
    run: Callable[[frozenset], str]

    @property
    def id(self) -> str:
        return f"{self.module}.{self.name}"


def _require(ok: bool, detail: str) -> str:
    if not ok:
        raise AssertionError(detail)
    return detail


def _grad(report) -> str:
    name, err = report.worst()
    return _require(report.passed, f"worst rel err {err:.2e} at {name} (tol {report.tol:g})")


def _bilinear(_):
    err = checks.bilinear_oracle_error(100)
    return _require(err <= 1e-12, f"max err {err:.2e}")


def _mmfs_oracle(_):
    err, n = checks.mmfs_oracle_error(48)
    return _require(err <= 1e-10, f"max err {err:.2e} over {n} configs")


def _mmfs_norm(_):
    err = checks.attention_mass_error(2000)
    return _require(err <= 1e-6, f"max |sum A - 1| = {err:.2e}")


def _mmfs_grad(_):
    return _grad(checks.mmfs_gradcheck(max_coords=16))


def _llm_zero(faults):
    gap = checks.llm_zero_init_gap(faults=faults)
    return _require(gap <= 1e-6, f"max gap {gap:.2e}")


def _dec_zero(faults):
    gap = checks.decoder_zero_init_gap(faults=faults)
    return _require(gap <= 1e-6, f"max gap {gap:.2e}")


def _causality(_):
    rep = checks.causality_check(20)
    return _require(rep.leaks == 0 and rep.dead == 0, f"{rep.perturbations} perturbations, {rep.leaks} leaks, {rep.dead} ignored")


def _llm_grad(_):
    return _grad(checks.llm_gradcheck(max_coords=8))


def _dec_grad(_):
    return _grad(checks.denoiser_gradcheck(max_coords=8))


def _sequence_roundtrip(_):
    rng = make_rng(0)
    for _ in range(200):
        els = checks.random_elements(rng, max_elems=6)
        seq = build(els, 3)
        validate(seq)
        if parse(seq) != els and not _texts_merge(els):
            raise AssertionError(f"parse(build(x)) != x for {els}")
    return "200 layouts"


def _texts_merge(els) -> bool:
    from .sequence import Text

    return any(isinstance(a, Text) and isinstance(b, Text) for a, b in zip(els, els[1:]))


def _vocab(_):
    v = Vocab(10)
    return _require((v.boi, v.eos, v.bos, v.n_predict, v.n_input) == (10, 11, 12, 12, 13), "id layout")


def _incremental(_):
    from .pipeline import MMInterleaved, incremental_logits
    from .tasks import copy_corpus, toy_model_config

    model = MMInterleaved(toy_model_config("copy"), seed=0)
    checks.randomize_gates(model.llm, make_rng(1))
    seq, imgs = copy_corpus(1, seed=3)[0]
    with torch.no_grad():
        levels, visual = model.tokenize(imgs)
        full, _, _ = model.llm([seq], visual, levels, [0])
    inc = incremental_logits(model, seq, imgs)
    err = float((full[0] - inc).abs().max())
    return _require(err <= 1e-5, f"max err {err:.2e}")


def _checkpoint(_):
    from .pipeline import MMInterleaved, load, save
    from .tasks import toy_model_config

    model = MMInterleaved(toy_model_config("copy"), seed=0)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.ckpt"
        save(path, model)
        back, _ = load(path)
    same = all(torch.equal(a, b) for a, b in zip(model.parameters(), back.parameters()))
    return _require(same, "bit-exact round trip")


def _flops(_):
    s = bench.CostScenario(d_model=4, n_layers=1, n_heads=1, n_visual=2, n_images=1, n_text=5, vocab=0)
    m = bench.count_macs(s)
    T = s.seq_len
    ok = m["self_attn"] == self_attn_macs_loop(T, 4) and m["ffn"] == ffn_macs_loop(T, 4)
    return _require(ok, f"T={T} C=4 formula vs enumeration")


SUITES: list[Suite] = [
    Suite("pyramid", "bilinear_oracle", _bilinear),
    Suite("mmfs", "oracle", _mmfs_oracle),
    Suite("mmfs", "normalization", _mmfs_norm),
    Suite("mmfs", "gradcheck", _mmfs_grad),
    Suite("sequence", "roundtrip", _sequence_roundtrip),
    Suite("sequence", "vocab", _vocab),
    Suite("mmllm", "zero_init", _llm_zero),
    Suite("mmllm", "causality", _causality),
    Suite("mmllm", "gradcheck", _llm_grad),
    Suite("imgdec", "zero_init", _dec_zero),
    Suite("imgdec", "gradcheck", _dec_grad),
    Suite("pipeline", "incremental", _incremental),
    Suite("pipeline", "checkpoint", _checkpoint),
    Suite("bench", "flops_formula", _flops),
]


def select(filter_: str | None) -> list[Suite]:
    if not filter_:
        return list(SUITES)
    keys = [k.strip() for k in filter_.split(",") if k.strip()]
    return [s for s in SUITES if any(s.module == k or s.id == k or s.id.startswith(k + ".") for k in keys)]


def run(filter_: str | None = None, faults=()) -> dict:
    faults = frozenset(faults)
    unknown = faults - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault(s): {', '.join(sorted(unknown))}")
    results = []
    for s in select(filter_):
        t0 = time.perf_counter()
        try:
            detail, status = s.run(faults), "pass"
        except AssertionError as e:
            detail, status = str(e), "fail"
        except Exception as e:  # a crashing suite is a failing suite
            detail, status = f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=3)}", "error"
        results.append(
            {"module": s.module, "id": s.id, "status": status, "detail": detail,
             "seconds": round(time.perf_counter() - t0, 3)}
        )
    return {
        "passed": all(r["status"] == "pass" for r in results),
        "faults": sorted(faults),
        "suites": results,
        "failures": [r["id"] for r in results if r["status"] != "pass"],
    }
