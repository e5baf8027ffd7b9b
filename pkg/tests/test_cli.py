import json

import numpy as np
import pytest

from cdgan.cli import main
from cdgan.ct_ingest import read_pgm

TINY_NET = {"image_size": [16, 16], "base_width": 4, "stages": 2, "rep_dim": 8}


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"image_size": [16, 16], "slices_per_volume": 4, "seed": 3,
                                "subjects_per_phase": 3, "split_fraction": 0.67}))
    assert main(["gen-phantoms", "--config", str(spec), "--out", str(root / "data")]) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"batch_size": 4, "checkpoint_interval": 2, "net": TINY_NET}))
    return root


def _train(root, out, *extra):
    return main(["train", "--config", str(root / "train.json"), "--model", "cdgan",
                 "--train-manifest", str(root / "data" / "train.jsonl"), "--out", str(out), *extra])


def test_gen_phantoms_outputs_and_record(phantoms):
    data = phantoms / "data"
    assert (data / "train.jsonl").exists() and (data / "test.jsonl").exists()
    rec = json.loads((data / "run_record.json").read_text())
    assert rec["command"] == "gen-phantoms"
    assert rec["seed"] == 3
    assert rec["config"]["spec"]["image_size"] == [16, 16]
    assert {"wall_clock_s", "version", "artifacts"} <= set(rec)


def test_gen_phantoms_is_idempotent(phantoms, tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"image_size": [16, 16], "slices_per_volume": 2, "subjects_per_phase": 2,
                               "split_fraction": 0.5}))
    out = tmp_path / "d"
    assert main(["gen-phantoms", "--config", str(cfg), "--out", str(out)]) == 0
    first = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "run_record.json"}
    assert main(["gen-phantoms", "--config", str(cfg), "--out", str(out)]) == 0
    second = {p: p.read_bytes() for p in out.rglob("*") if p.is_file() and p.name != "run_record.json"}
    assert first == second


def test_gen_phantoms_rejects_bad_overlap(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"enhancement_overlap": 1.5}))
    assert main(["gen-phantoms", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "enhancement_overlap" in capsys.readouterr().err


def test_train_ten_iterations(phantoms, tmp_path):
    assert _train(phantoms, tmp_path / "run", "--iterations", "10", "--seed", "1") == 0
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == list(range(1, 11))
    assert (tmp_path / "run" / "checkpoints" / "iter_0000010.ckpt").exists()
    rec = json.loads((tmp_path / "run" / "run_record.json").read_text())
    assert rec["seed"] == 1 and rec["config"]["train"]["iterations"] == 10
    assert rec["config"]["train"]["batch_size"] == 4


def test_train_resume_continues_numbering(phantoms, tmp_path):
    out = tmp_path / "run"
    assert _train(phantoms, out, "--iterations", "4") == 0
    ckpt = out / "checkpoints" / "iter_0000004.ckpt"
    assert _train(phantoms, out, "--iterations", "6", "--resume", str(ckpt)) == 0
    its = [json.loads(line)["iteration"] for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert its == list(range(1, 7))


def test_train_usage_errors(phantoms, tmp_path, capsys):
    assert main(["train", "--model", "vgg", "--train-manifest", "x"]) == 2
    err = capsys.readouterr().err
    assert "resnet" in err and "stargan_d" in err
    assert main(["train", "--train-manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)]) == 2


def test_train_nan_exits_3(phantoms, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"batch_size": 4, "lr": float("inf"), "net": TINY_NET}))
    code = main(["train", "--config", str(cfg), "--train-manifest", str(phantoms / "data" / "train.jsonl"),
                 "--iterations", "3", "--out", str(tmp_path / "nan")])
    assert code == 3
    assert ".npz" in capsys.readouterr().err


def test_baseline_train_eval_and_synthesize_refusal(phantoms, tmp_path, capsys):
    out = tmp_path / "unet"
    assert main(["train", "--model", "unet", "--train-manifest", str(phantoms / "data" / "train.jsonl"),
                 "--iterations", "2", "--out", str(out)]) == 0
    ckpt = out / "checkpoints" / "iter_0000002.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--test-manifest", str(phantoms / "data" / "test.jsonl"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.json").exists()
    vol = next((phantoms / "data" / "volumes").glob("*.json"))
    capsys.readouterr()
    assert main(["synthesize", "--checkpoint", str(ckpt), "--input", str(vol), "--out", str(tmp_path / "s")]) == 2
    assert "no generator in checkpoint" in capsys.readouterr().err


def test_eval_compare_and_synthesize(phantoms, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(phantoms, run, "--iterations", "2") == 0
    ckpt = run / "checkpoints" / "iter_0000002.ckpt"
    test_m = str(phantoms / "data" / "test.jsonl")
    assert main(["eval", "--checkpoint", str(ckpt), "--test-manifest", test_m, "--out", str(tmp_path / "ev")]) == 0
    report = tmp_path / "ev" / "report.json"
    assert (tmp_path / "ev" / "confusion.txt").exists()
    capsys.readouterr()
    assert main(["compare", str(report), str(report), "--out", str(tmp_path / "cmp")]) == 0
    text = capsys.readouterr().out
    assert "t = 0" in text and "p = 1" in text and "degenerate" in text

    other = json.loads(report.read_text())
    first = sorted(other["per_subject"])[0]
    other["per_subject"]["someone_else"] = other["per_subject"].pop(first)
    (tmp_path / "other.json").write_text(json.dumps(other))
    assert main(["compare", str(report), str(tmp_path / "other.json"), "--out", str(tmp_path / "c2")]) == 2

    vol = sorted((phantoms / "data" / "volumes").glob("*.json"))[0]
    for out in ("s1", "s2"):
        assert main(["synthesize", "--checkpoint", str(ckpt), "--input", str(vol), "--slice-index", "1",
                     "--target-phase", "all", "--out", str(tmp_path / out)]) == 0
    files = sorted(p.name for p in (tmp_path / "s1").glob("*.pgm"))
    assert len(files) == 3 and len(set(files)) == 3
    for name in files:
        assert read_pgm(tmp_path / "s1" / name).shape == (16, 16)
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
        npy = name.replace(".pgm", ".npy")
        np.testing.assert_array_equal(np.load(tmp_path / "s1" / npy), np.load(tmp_path / "s2" / npy))
    assert main(["synthesize", "--checkpoint", str(ckpt), "--input", str(vol), "--target-phase", "delayed",
                 "--out", str(tmp_path / "s3")]) == 0
    assert len(list((tmp_path / "s3").glob("*.pgm"))) == 1


def test_output_root_env(phantoms, tmp_path, monkeypatch):
    monkeypatch.setenv("CDGAN_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"image_size": [16, 16], "slices_per_volume": 1, "subjects_per_phase": 1,
                               "split_fraction": 0.5}))
    assert main(["gen-phantoms", "--config", str(cfg)]) == 0
    assert (tmp_path / "root" / "gen-phantoms" / "run_record.json").exists()
