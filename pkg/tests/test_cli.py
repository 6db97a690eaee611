import csv
import io
import json
import subprocess
import sys

import pytest

from mminterleaved.cli import EXIT_FAIL, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from mminterleaved.config import ConfigError, RunConfig, parse_pairs, read_config, resolve, write_config
from mminterleaved.schemas import validate_csv, validate_json

# small model and short schedule so CLI runs take seconds
TINY = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "n_train=8", "--set", "batch_size=4",
        "--set", "T=10", "--set", "n_visual=4", "--set", "cond_tokens=4"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("copy")
    code = main(["train", "--task", "copy", "--steps", "3", "--seed", "1", "--out", str(out), *TINY])
    assert code == EXIT_OK
    return out


# ------------------------------------------------------------------ config


def test_parse_pairs_and_comments():
    got = parse_pairs(["# comment", "", "seed = 3", "lr=0.5  # trailing", "mmfs_decoder = false", "steps = none"])
    assert got == {"seed": 3, "lr": 0.5, "mmfs_decoder": False, "steps": None}


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="bogus"):
        parse_pairs(["bogus = 1"])
    with pytest.raises(ConfigError, match="seed"):
        parse_pairs(["seed = abc"])
    with pytest.raises(ConfigError):
        RunConfig(task="vision")


def test_config_file_roundtrip(tmp_path):
    rc = RunConfig(task="lm", seed=4, lr=0.01, mmfs_llm=False)
    write_config(tmp_path / "a.cfg", rc)
    assert resolve(tmp_path / "a.cfg") == rc
    assert read_config(tmp_path / "a.cfg")["lr"] == 0.01


def test_precedence_and_env(tmp_path, monkeypatch):
    (tmp_path / "e.cfg").write_text("seed = 7\ntask = lm\n")
    monkeypatch.setenv("MMIV_CONFIG", str(tmp_path / "e.cfg"))
    assert resolve().seed == 7
    assert resolve(overrides={"seed": 9}).seed == 9
    rc = resolve(overrides={"d_model": 16, "n_heads": 2, "lam": 0.5})
    assert rc.model_config().llm.d_model == 16 and rc.train_config().lam == 0.5


# ------------------------------------------------------------------ selftest


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    summary = json.loads(out)
    validate_json(summary, "selftest")
    assert code == EXIT_OK and summary["passed"] and summary["failures"] == []
    assert {s["module"] for s in summary["suites"]} >= {"pyramid", "mmfs", "sequence", "mmllm", "imgdec", "pipeline", "bench"}
    assert all(s["status"] == "pass" for s in summary["suites"])


def test_selftest_filter(capsys):
    code, out, _ = run(capsys, "selftest", "--filter", "mmfs")
    summary = json.loads(out)
    assert code == EXIT_OK and summary["suites"]
    assert all(s["module"] == "mmfs" for s in summary["suites"])


@pytest.mark.parametrize("fault,suite", [("alpha-init", "mmllm.zero_init"), ("conv-init", "imgdec.zero_init")])
def test_selftest_fault_injection(capsys, fault, suite):
    code, out, _ = run(capsys, "selftest", "--filter", suite.split(".")[0], "--inject", fault)
    summary = json.loads(out)
    assert code == EXIT_FAIL and suite in summary["failures"]
    assert summary["faults"] == [fault]


# ------------------------------------------------------------------ usage and I/O errors


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "train", "--set", "bogus=1", "--out", str(tmp_path))[0] == EXIT_USAGE
    code, _, err = run(capsys, "train", "--set", "bogus=1", "--out", str(tmp_path))
    assert "bogus" in err
    assert run(capsys, "nonsense")[0] == EXIT_USAGE
    assert run(capsys, "train", "--task", "vision")[0] == EXIT_USAGE


def test_missing_checkpoint_is_io_error(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path))
    assert code == EXIT_IO and "nope.ckpt" in err


def test_corrupt_checkpoint_is_io_error(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" * 4)
    assert run(capsys, "generate", "--checkpoint", str(bad), "--out", str(tmp_path))[0] == EXIT_IO


def test_missing_config_file_is_io_error(capsys, tmp_path):
    assert run(capsys, "bench", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path))[0] == EXIT_IO


# ------------------------------------------------------------------ train / resume


def test_train_outputs(trained):
    lines = (trained / "train.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        validate_json(json.loads(line), "train_log")
    assert (trained / "model.ckpt").exists()
    assert resolve(trained / "run.cfg").task == "copy"


def test_train_summary_on_stdout(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--task", "lm", "--steps", "2", "--out", str(tmp_path), *TINY)
    summary = json.loads(out)
    validate_json(summary, "train_summary")
    assert code == EXIT_OK and summary["steps"] == 2
    assert summary["final"]["total"] == summary["final"]["ntp"]  # lm task trains with lambda = 0


def test_no_mmfs_decoder_flag(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--task", "copy", "--steps", "1", "--no-mmfs-decoder", "--out", str(tmp_path), *TINY)
    from mminterleaved.pipeline import read_checkpoint

    header, tensors = read_checkpoint(tmp_path / "model.ckpt")
    assert code == EXIT_OK and header["config"]["dec"]["use_mmfs"] is False
    assert not any(n.startswith("decoder.down_mmfs") for n in tensors)


def test_resume_continues_the_run(capsys, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(capsys, "train", "--task", "copy", "--steps", "4", "--out", str(full), *TINY)[0] == EXIT_OK
    assert run(capsys, "train", "--task", "copy", "--steps", "2", "--out", str(part), *TINY)[0] == EXIT_OK
    code, _, _ = run(capsys, "train", "--task", "copy", "--steps", "4", "--out", str(part),
                     "--resume", str(part / "model.ckpt"), *TINY)
    assert code == EXIT_OK
    a = [json.loads(x) for x in (full / "train.jsonl").read_text().splitlines()]
    b = [json.loads(x) for x in (part / "train.jsonl").read_text().splitlines()]
    assert [r["step"] for r in b] == [r["step"] for r in a]
    for x, y in zip(a, b):
        assert abs(x["total"] - y["total"]) <= 1e-4


# ------------------------------------------------------------------ generate


def test_generate_is_deterministic(capsys, trained, tmp_path):
    outs = []
    for name in ("g1", "g2"):
        d = tmp_path / name
        code, out, _ = run(capsys, "generate", "--checkpoint", str(trained / "model.ckpt"), "--seed", "3",
                           "--max-new", "4", "--out", str(d))
        assert code == EXIT_OK
        res = json.loads((d / "generation.json").read_text())
        validate_json(res, "generation")
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        outs.append(files)
    assert outs[0] == outs[1]
    assert any(n.endswith(".ppm") for n in outs[0])
    assert all(b[:2] == b"P6" for n, b in outs[0].items() if n.endswith(".ppm"))


def test_generate_without_checkpoint_is_usage_error(capsys, tmp_path):
    assert run(capsys, "generate", "--out", str(tmp_path))[0] == EXIT_USAGE


# ------------------------------------------------------------------ bench and ablate


def test_bench_artifacts(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--out", str(tmp_path), "--runtime", "--repetitions", "3")
    assert code == EXIT_OK
    text = (tmp_path / "flops.csv").read_text()
    validate_csv(text, "flops.csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    keys = {(r["variant"], r["n_images"], r["n_text"]) for r in rows}
    assert len(rows) == len(keys) == 3 * 8 * 3
    validate_json(json.loads((tmp_path / "token_efficiency.json").read_text()), "token_efficiency")
    validate_csv((tmp_path / "runtime.csv").read_text(), "runtime.csv")
    for nt in (32, 128, 256):
        assert (tmp_path / f"flops_nt{nt}.svg").read_text().startswith("<svg")
    assert (tmp_path / "runtime.svg").exists()


def test_bench_is_deterministic(capsys, tmp_path):
    run(capsys, "bench", "--out", str(tmp_path / "a"))
    run(capsys, "bench", "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "flops.csv").read_bytes() == (tmp_path / "b" / "flops.csv").read_bytes()


def test_ablate_table(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", "--task", "copy", "--steps", "2", "--seeds", "0", "--out", str(tmp_path),
                       "--set", "sample_steps=2", *TINY)
    assert code == EXIT_OK
    text = (tmp_path / "ablation.csv").read_text()
    validate_csv(text, "ablation.csv")
    rows = list(csv.DictReader(io.StringIO(text)))
    assert sorted(r["mmfs_decoder"] for r in rows) == ["0", "1"]
    assert all(float(r["recon_mse"]) >= 0 for r in rows)
    summary = json.loads((tmp_path / "ablation.json").read_text())
    validate_json(summary, "ablation")
    assert summary["seeds"][0]["seed"] == 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mminterleaved", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("selftest", "train", "generate", "bench", "ablate"):
        assert cmd in res.stdout
