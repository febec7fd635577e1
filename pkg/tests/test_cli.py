import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from priorforecast.cli import main, n_workers
from priorforecast.errors import InvalidConfig
from priorforecast.forecaster import load_params
from priorforecast.training import load_config, train

N_SCENES = 12
EPOCHS = 2


def _write_config(root: Path) -> Path:
    cfg = root / "experiment.toml"
    cfg.write_text(
        "seed = 9\n"
        "\n"
        "[generate]\n"
        f"n_scenes = {N_SCENES}\n"
        "actors_min = 2\n"
        "actors_max = 3\n"
        "noncompliance_rate = 0.1\n"
        "\n"
        "[dataset]\n"
        f'train_dir = "{root}/train"\n'
        f'eval_dir = "{root}/eval"\n'
        "\n"
        "[loss]\n"
        'mode = "mle_only"\n'
        "\n"
        "[optim]\n"
        f"epochs = {EPOCHS}\n"
        "batch_scenes = 4\n"
    )
    return cfg


def _run_pipeline(root: Path) -> dict:
    cfg = _write_config(root)
    paths = {
        "root": root,
        "config": cfg,
        "train": root / "train",
        "eval": root / "eval",
        "model": root / "model",
        "metrics": root / "metrics",
        "plan": root / "plan",
    }
    assert main(["gen", "--config", str(cfg), "--out", str(paths["train"])]) == 0
    assert main(["gen", "--config", str(cfg), "--seed", "77",
                 "--out", str(paths["eval"])]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(paths["model"])]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(paths["metrics"]),
                 "--checkpoint", str(paths["model"] / "checkpoint.bin")]) == 0
    assert main(["plan-eval", "--config", str(cfg), "--out", str(paths["plan"]),
                 "--checkpoint", str(paths["model"] / "checkpoint.bin")]) == 0
    return paths


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("pipe"))


def test_workers_env(monkeypatch):
    monkeypatch.delenv("PRIORFORECAST_THREADS", raising=False)
    assert n_workers() == 1
    monkeypatch.setenv("PRIORFORECAST_THREADS", "3")
    assert n_workers() == 3
    monkeypatch.setenv("PRIORFORECAST_THREADS", "0")
    assert n_workers() >= 1
    monkeypatch.setenv("PRIORFORECAST_THREADS", "zoom")
    with pytest.raises(InvalidConfig):
        n_workers()
    monkeypatch.setenv("PRIORFORECAST_THREADS", "-2")
    with pytest.raises(InvalidConfig):
        n_workers()


def test_gen_artifacts(pipeline):
    for split in ("train", "eval"):
        out = pipeline[split]
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["scenes"]) == N_SCENES
        for entry in manifest["scenes"]:
            assert (out / entry["file"]).exists()
        run = json.loads((out / "run_manifest.json").read_text())
        assert run["command"] == "gen"
        assert Path(run["dataset_manifest"]).exists()
    # the two splits use different seeds and must differ
    a = (pipeline["train"] / "manifest.json").read_text()
    b = (pipeline["eval"] / "manifest.json").read_text()
    assert a != b


def test_train_artifacts(pipeline):
    model = pipeline["model"]
    assert (model / "checkpoint.bin").exists()
    hist = (model / "history.csv").read_text().strip().splitlines()
    assert len(hist) == 1 + EPOCHS
    run = json.loads((model / "run_manifest.json").read_text())
    assert run["checkpoint"] == str(model / "checkpoint.bin")
    assert str(model / "history.csv") in run["reports"]
    params, arch = load_params(model / "checkpoint.bin")
    assert np.all(np.isfinite(params))
    assert arch.n_waypoints == 11


def test_train_zero_epochs_equals_initialization(pipeline, tmp_path):
    out = tmp_path / "zero"
    assert main(["train", "--config", str(pipeline["config"]),
                 "--out", str(out), "--epochs", "0"]) == 0
    cli_params, _ = load_params(out / "checkpoint.bin")
    cfg = load_config(pipeline["config"])
    cfg = dataclasses.replace(cfg, optim=dataclasses.replace(cfg.optim, epochs=0))
    api_params, history = train(cfg)
    assert history.rows == []
    np.testing.assert_array_equal(cli_params, api_params)
    assert (out / "history.csv").read_text().strip().splitlines()[1:] == []


def test_train_init_warm_starts_from_checkpoint(pipeline, tmp_path):
    base_ckpt = pipeline["model"] / "checkpoint.bin"
    out = tmp_path / "warm"
    assert main(["train", "--config", str(pipeline["config"]), "--out", str(out),
                 "--epochs", "0", "--init", str(base_ckpt)]) == 0
    warm_params, _ = load_params(out / "checkpoint.bin")
    base_params, _ = load_params(base_ckpt)
    np.testing.assert_array_equal(warm_params, base_params)
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["init_checkpoint"] == str(base_ckpt)
    # a real continuation must move away from the starting point
    out2 = tmp_path / "warm2"
    assert main(["train", "--config", str(pipeline["config"]), "--out", str(out2),
                 "--epochs", "1", "--init", str(base_ckpt)]) == 0
    moved, _ = load_params(out2 / "checkpoint.bin")
    assert not np.array_equal(moved, base_params)


def test_eval_reports(pipeline, tmp_path):
    csv_text = (pipeline["metrics"] / "metrics.csv").read_text()
    assert csv_text.startswith("class,count,final_lane_error_pct,meanade_m,minade_m")
    payload = json.loads((pipeline["metrics"] / "metrics.json").read_text())
    assert payload["samples"] == 50
    assert payload["classes"]
    # re-running the same evaluation reproduces the bytes
    again = tmp_path / "metrics2"
    assert main(["eval", "--config", str(pipeline["config"]), "--out", str(again),
                 "--checkpoint", str(pipeline["model"] / "checkpoint.bin")]) == 0
    assert (again / "metrics.csv").read_bytes() == csv_text.encode()
    assert (again / "metrics.json").read_bytes() == \
        (pipeline["metrics"] / "metrics.json").read_bytes()


def test_eval_parallel_matches_serial(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("PRIORFORECAST_THREADS", "4")
    out = tmp_path / "threads"
    assert main(["eval", "--config", str(pipeline["config"]), "--out", str(out),
                 "--checkpoint", str(pipeline["model"] / "checkpoint.bin")]) == 0
    assert (out / "metrics.csv").read_bytes() == \
        (pipeline["metrics"] / "metrics.csv").read_bytes()


def test_plan_eval_report(pipeline):
    lines = (pipeline["plan"] / "planning.csv").read_text().splitlines()
    assert lines[0] == "model,collision_pct,l2_human_m,lat_accel_ms2,jerk_ms3,progress_m"
    cells = lines[1].split(",")
    assert cells[0] == "model"  # checkpoint.bin labeled by its directory
    rate = float(cells[1])
    assert 0.0 <= rate <= 100.0
    assert float(cells[5]) >= 0.0  # progress


def test_report_compare(pipeline, tmp_path):
    zero = tmp_path / "zero_model"
    assert main(["train", "--config", str(pipeline["config"]),
                 "--out", str(zero), "--epochs", "0"]) == 0
    out = tmp_path / "report"
    assert main([
        "report", "--config", str(pipeline["config"]), "--out", str(out),
        "--compare",
        f"{pipeline['model'] / 'checkpoint.bin'},{zero / 'checkpoint.bin'}",
    ]) == 0
    text = (out / "report.txt").read_text()
    assert "model" in text and "zero_model" in text
    assert "collision%" in text
    assert (out / "metrics_model.csv").exists()
    assert (out / "metrics_zero_model.csv").exists()
    assert (out / "planning.csv").read_text().count("\n") == 3  # header + 2 rows
    for name in ("loss_curves.svg", "metrics_bars.svg", "scene_samples.svg"):
        svg = (out / name).read_text()
        assert svg.startswith("<svg ")
        assert svg.rstrip().endswith("</svg>")
        assert "polyline" in svg or "rect" in svg
    run = json.loads((out / "run_manifest.json").read_text())
    for ref in run["reports"]:
        assert Path(ref).exists()


def test_bad_flags_exit_two(capsys):
    with pytest.raises(SystemExit) as err:
        main(["train"])  # missing required flags
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["frobnicate", "--config", "x", "--out", "y"])
    assert err.value.code == 2
    capsys.readouterr()


def test_module_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[loss]\nmode = "mle_only"\n')  # no seed anywhere
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err

    cfg = _write_config(tmp_path)
    missing = tmp_path / "nope" / "checkpoint.bin"
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o2"),
                 "--checkpoint", str(missing)]) == 1
    assert "error:" in capsys.readouterr().err

    typo = tmp_path / "typo.toml"
    typo.write_text("seed = 1\n[mystery]\nx = 2\n")
    assert main(["train", "--config", str(typo), "--out", str(tmp_path / "o3")]) == 1
    capsys.readouterr()


def test_pipeline_rerun_is_byte_identical(pipeline, tmp_path_factory):
    other = _run_pipeline(tmp_path_factory.mktemp("pipe_again"))
    pairs = [
        ("train", "manifest.json"),
        ("eval", "manifest.json"),
        ("model", "checkpoint.bin"),
        ("model", "history.csv"),
        ("metrics", "metrics.csv"),
        ("metrics", "metrics.json"),
        ("plan", "planning.csv"),
    ]
    for key, name in pairs:
        a = (pipeline[key] / name).read_bytes()
        b = (other[key] / name).read_bytes()
        assert a == b, f"{key}/{name} differs between identical runs"
