import json

import numpy as np
import pytest
import yaml

from lrhyper.cli import main, load_run_config

TINY_NET = {
    "task": "segmentation",
    "n_modalities": 2,
    "n_classes": 3,
    "channels": [4, 8],
    "spatial_rank": 2,
    "train": {"epochs": 2, "batch_size": 4, "lr": 0.01, "momentum": 0.9,
              "seed": 0},
}

TINY_DATA = {
    "kind": "segmentation",
    "n_modalities": 2,
    "size": 12,
    "image_size": 16,
    "n_classes": 3,
    "seed": 5,
}


@pytest.fixture
def workdir(tmp_path):
    net_cfg = tmp_path / "net.yaml"
    net_cfg.write_text(yaml.safe_dump(TINY_NET))
    data_cfg = tmp_path / "data.yaml"
    data_cfg.write_text(yaml.safe_dump(TINY_DATA))
    assert main(["gen-data", "--spec", str(data_cfg),
                 "--out", str(tmp_path / "d")]) == 0
    return tmp_path


def test_gen_data_writes_container(workdir):
    assert (workdir / "d" / "data.bin").exists()


def test_params_report(workdir, capsys):
    out = workdir / "p"
    assert main(["params", "--spec", str(workdir / "net.yaml"),
                 "--out", str(out)]) == 0
    assert "hypernetwork parameters" in capsys.readouterr().out
    report = json.loads((out / "params.json").read_text())
    assert report["hyper_total"] > 0


def test_train_then_eval_round_trip(workdir):
    out = workdir / "run"
    argv = ["train", "--spec", str(workdir / "net.yaml"),
            "--data", str(workdir / "d" / "data.bin"), "--out", str(out)]
    assert main(argv) == 0
    assert (out / "checkpoint.bin").exists()
    assert (out / "metrics.jsonl").exists()
    train_eval = json.loads((out / "eval.json").read_text())

    out2 = workdir / "reval"
    assert main(["eval", "--spec", str(workdir / "net.yaml"),
                 "--data", str(workdir / "d" / "data.bin"),
                 "--checkpoint", str(out / "checkpoint.bin"),
                 "--out", str(out2)]) == 0
    recheck = json.loads((out2 / "eval.json").read_text())
    assert recheck["rows"] == train_eval["rows"]
    assert recheck["average"] == train_eval["average"]


def test_train_is_deterministic(workdir):
    argv = lambda out: ["train", "--spec", str(workdir / "net.yaml"),
                        "--data", str(workdir / "d" / "data.bin"),
                        "--out", str(out), "--seed", "3"]
    assert main(argv(workdir / "a")) == 0
    assert main(argv(workdir / "b")) == 0
    assert ((workdir / "a" / "metrics.jsonl").read_bytes()
            == (workdir / "b" / "metrics.jsonl").read_bytes())
    ea = json.loads((workdir / "a" / "eval.json").read_text())
    eb = json.loads((workdir / "b" / "eval.json").read_text())
    ea.pop("throughput_samples_per_s")
    eb.pop("throughput_samples_per_s")
    assert ea == eb


def test_eval_single_subset(workdir):
    out = workdir / "run1"
    assert main(["train", "--spec", str(workdir / "net.yaml"),
                 "--data", str(workdir / "d" / "data.bin"),
                 "--out", str(out)]) == 0
    out2 = workdir / "one"
    assert main(["eval", "--spec", str(workdir / "net.yaml"),
                 "--data", str(workdir / "d" / "data.bin"),
                 "--checkpoint", str(out / "checkpoint.bin"),
                 "--subset", "2", "--out", str(out2)]) == 0
    report = json.loads((out2 / "eval.json").read_text())
    assert [r["m"] for r in report["rows"]] == [2]


def test_eval_rejects_mismatched_spec(workdir, tmp_path, capsys):
    out = workdir / "run2"
    assert main(["train", "--spec", str(workdir / "net.yaml"),
                 "--data", str(workdir / "d" / "data.bin"),
                 "--out", str(out)]) == 0
    other = dict(TINY_NET, channels=[4, 8, 16])
    other_cfg = tmp_path / "other.yaml"
    other_cfg.write_text(yaml.safe_dump(other))
    rc = main(["eval", "--spec", str(other_cfg),
               "--data", str(workdir / "d" / "data.bin"),
               "--checkpoint", str(out / "checkpoint.bin"),
               "--out", str(workdir / "x")])
    assert rc == 1
    assert "different network spec" in capsys.readouterr().err


def test_gradcheck_passes_on_tiny_spec(workdir, capsys):
    tiny = dict(TINY_NET)
    tiny.pop("train")
    cfg = workdir / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(tiny))
    out = workdir / "g"
    assert main(["gradcheck", "--spec", str(cfg), "--seed", "0",
                 "--out", str(out)]) == 0
    assert "max rel err" in capsys.readouterr().out
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["max"] <= report["tolerance"]


def test_unknown_flag_exits_nonzero(workdir):
    with pytest.raises(SystemExit) as e:
        main(["params", "--spec", str(workdir / "net.yaml"), "--frobnicate"])
    assert e.value.code != 0


def test_missing_data_file_reports_error(workdir, capsys):
    rc = main(["train", "--spec", str(workdir / "net.yaml"),
               "--data", str(workdir / "nope.bin"),
               "--out", str(workdir / "y")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_out_env_var_sets_default(workdir, monkeypatch, tmp_path):
    target = tmp_path / "envout"
    monkeypatch.setenv("LRHYPER_OUT", str(target))
    monkeypatch.chdir(tmp_path)
    assert main(["params", "--spec", str(workdir / "net.yaml")]) == 0
    assert (target / "params.json").exists()


def test_ablate_decomp_writes_report(workdir):
    out = workdir / "ab"
    assert main(["ablate-decomp", "--spec", str(workdir / "net.yaml"),
                 "--data", str(workdir / "d" / "data.bin"),
                 "--out", str(out), "--epochs", "1"]) == 0
    report = json.loads((out / "ablate_decomp.json").read_text())
    assert [r["variant"] for r in report] == ["cp", "tucker"]


def test_load_run_config_splits_sections(workdir):
    spec, cfg = load_run_config(workdir / "net.yaml")
    assert spec.channels == [4, 8]
    assert cfg.epochs == 2
