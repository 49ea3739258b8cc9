import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from codeprior_sr.cli import main

from conftest import tiny_config


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    train = tiny_config().to_dict()
    path.write_text(json.dumps({"data": {"n": 10, "size": 32, "seed": 3}, "train": train}))
    return path


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory, cfg_file):
    root = tmp_path_factory.mktemp("cli")
    c = ["--config", str(cfg_file)]
    assert main(["make-data", "--out", str(root / "data"), *c]) == 0
    d = ["--data", str(root / "data")]
    assert main(["pretrain-codebook", "--out", str(root / "pre"), *c, *d]) == 0
    assert main(["train-stage1", "--out", str(root / "s1"), "--checkpoint", str(root / "pre" / "pretrain.ckpt"), *c, *d]) == 0
    assert main(["train-stage2", "--out", str(root / "s2"), "--checkpoint", str(root / "s1" / "stage1.ckpt"), *c, *d]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_outputs(cli_runs):
    for phase, ck in (("pre", "pretrain.ckpt"), ("s1", "stage1.ckpt"), ("s2", "stage2.ckpt")):
        run = cli_runs / phase
        assert (run / ck).exists() and (run / "DONE").exists()
        snap = json.loads((run / "run_config.json").read_text())
        assert snap["config"]["train"]["batch_size"] == 2
        assert (run / "run.log").exists()


def test_hit_rate_rows_per_k(cli_runs, tmp_path):
    out = tmp_path / "hr"
    args = ["hit-rate", "--out", str(out), "--checkpoint", str(cli_runs / "s2" / "stage2.ckpt"), "--data", str(cli_runs / "data")]
    assert main([*args, "--k", "1", "3", "5"]) == 0
    rows = read_rows(out / "hit_rate.csv")
    assert [int(r["k"]) for r in rows] == [1, 3, 5]
    assert (out / "hit_rate.png").stat().st_size > 0
    first = (out / "hit_rate.csv").read_bytes()
    assert main([*args, "--k", "1", "3", "5", "--overwrite"]) == 0
    assert (out / "hit_rate.csv").read_bytes() == first


def test_evaluate_and_infer(cli_runs, tmp_path):
    ck = str(cli_runs / "s2" / "stage2.ckpt")
    assert main(["evaluate", "--out", str(tmp_path / "ev"), "--checkpoint", ck, "--data", str(cli_runs / "data")]) == 0
    rows = read_rows(tmp_path / "ev" / "metrics.csv")
    assert rows[-1]["image_id"] == "mean" and len(rows) == 3

    lr = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    np.save(tmp_path / "x.npy", lr)
    assert main(["infer", "--out", str(tmp_path / "inf"), "--checkpoint", ck, "--input", str(tmp_path / "x.npy")]) == 0
    assert np.load(tmp_path / "inf" / "x_sr.npy").shape == (32, 32, 3)
    assert (tmp_path / "inf" / "x_sr.png").exists()


def test_bench_and_plot(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench-matching", "--out", str(out), "--sizes", "16", "32", "64", "--k", "3"]) == 0
    rows = read_rows(out / "bench.csv")
    assert {r["matcher"] for r in rows} == {"topk", "global_attention"} and len(rows) == 6
    assert (out / "bench.png").exists()

    figs = tmp_path / "figs"
    assert main(["plot", "--out", str(figs), "--from", str(out / "bench.csv")]) == 0
    assert (figs / "bench.png").stat().st_size > 0
    # second render refuses without --overwrite
    assert main(["plot", "--out", str(figs), "--from", str(out / "bench.csv")]) == 1
    assert main(["plot", "--out", str(figs), "--from", str(out / "bench.csv"), "--overwrite"]) == 0


def test_plot_rejects_unknown_csv(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    assert main(["plot", "--out", str(tmp_path / "o"), "--from", str(tmp_path / "x.csv")]) == 1


def test_ablate_variants(cli_runs, tmp_path, cfg_file):
    out = tmp_path / "abl"
    argv = ["ablate", "--out", str(out), "--config", str(cfg_file), "--data", str(cli_runs / "data"),
            "--checkpoint", str(cli_runs / "s1" / "stage1.ckpt"), "--steps", "2", "--variant", "baseline", "top3", "full"]
    assert main(argv) == 0
    assert [r["variant"] for r in read_rows(out / "ablation.csv")] == ["baseline", "top3", "full"]
    for v, (topk, aa) in {"baseline": (False, False), "top3": (True, False), "full": (True, True)}.items():
        cfg = json.loads((out / v / "config.json").read_text())["train"]
        assert (cfg["net"]["use_topk"], cfg["net"]["use_aa"]) == (topk, aa)
        assert cfg["stage2_steps"] == 2


def test_overwrite_guard(cli_runs, cfg_file):
    argv = ["make-data", "--out", str(cli_runs / "data"), "--config", str(cfg_file)]
    assert main(argv) == 1
    assert (cli_runs / "data" / "manifest.jsonl").exists()


def test_usage_errors(tmp_path, capsys):
    assert main(["no-such-command", "--out", str(tmp_path)]) == 2
    assert main(["make-data", "--out", str(tmp_path / "a"), "--bogus"]) == 2
    assert main(["make-data"]) == 2
    assert main(["bench-matching", "--out", str(tmp_path / "b"), "--scale", "3"]) == 2
    assert main(["train-stage1", "--out", str(tmp_path / "c")]) == 2
    assert main(["train-stage2", "--out", str(tmp_path / "d"), "--variant", "aa", "full"]) == 2
    assert main(["make-data", "--out", str(tmp_path / "e"), "--config", str(tmp_path / "none.json")]) == 2
    (tmp_path / "bad.json").write_text('{"train": {"nonsense": 1}}')
    assert main(["pretrain-codebook", "--out", str(tmp_path / "f"), "--config", str(tmp_path / "bad.json"), "--data", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure(tmp_path, capsys):
    rc = main(["evaluate", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: FileNotFoundError")


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "codeprior_sr.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "bench-matching" in r.stdout
