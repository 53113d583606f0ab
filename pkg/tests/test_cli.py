import json
from pathlib import Path

import pytest

from delta_lfm.artifacts import read_csv, read_pgm
from delta_lfm.cli import main
from delta_lfm.config import config_hash, load_config

SMOKE = Path(__file__).parents[1] / "configs" / "smoke.json"


def run(*args):
    return main([*map(str, args)])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    for cmd in ("gen-data", "train-ae", "train-flow", "evaluate", "export-latents", "sensitivity"):
        assert run(cmd, "--config", SMOKE, "--out", out) == 0, cmd
    assert run("predict", "--config", SMOKE, "--out", out, "--patient", 0) == 0
    return out


def test_pipeline_outputs(smoke_run):
    names = {p.name for p in smoke_run.iterdir()}
    assert {"cohort", "split.json", "ae.ckpt", "model.ckpt", "history.csv", "metrics.csv",
            "summary.json", "latents.csv", "sensitivity.csv", "predict"} <= names
    h = config_hash(load_config(SMOKE))
    for csv in ("history.csv", "metrics.csv", "latents.csv", "sensitivity.csv"):
        meta, rows = read_csv(smoke_run / csv)
        assert meta["config_hash"] == h and rows, csv
    _, hist = read_csv(smoke_run / "history.csv")
    assert [r["stage"] for r in hist] == ["ae"] * 3 + ["flow"] * 3


def test_split_json_keeps_fractions_verbatim(smoke_run):
    doc = json.loads((smoke_run / "split.json").read_text())
    assert doc["fractions"] == {"train": 0.8, "val": 0.05, "test": 0.15}
    assert sorted(doc["train"] + doc["val"] + doc["test"]) == list(range(12))


def test_summary_round_trips_and_matches_metrics(smoke_run):
    doc = json.loads((smoke_run / "summary.json").read_text())
    _, rows = read_csv(smoke_run / "metrics.csv")
    assert doc["n_pairs"] == len(rows)
    mean = sum(float(r["delta_rmae"]) for r in rows) / len(rows)
    assert doc["overall"]["delta_rmae"]["mean"] == pytest.approx(mean, rel=1e-8)
    assert json.loads(json.dumps(doc)) == doc


def test_copy_baseline_scores_two(smoke_run):
    assert run("evaluate", "--config", SMOKE, "--out", smoke_run, "--copy-baseline") == 0
    doc = json.loads((smoke_run / "summary_copy_baseline.json").read_text())
    assert doc["overall"]["delta_rmae"]["mean"] == 2.0
    assert doc["overall"]["delta_rmae"]["std"] == 0.0
    assert (smoke_run / "metrics.csv").exists()


def test_latents_columns(smoke_run):
    _, rows = read_csv(smoke_run / "latents.csv")
    assert len(rows[0]) == 5 + 8 * 8 + 2
    assert {r["split"] for r in rows} <= {"train", "val", "test"}


def test_sensitivity_rows(smoke_run):
    _, rows = read_csv(smoke_run / "sensitivity.csv")
    assert len(rows) == 21
    assert rows[0] == {"sigma": "0", "mean": "2", "std": "0", "bias": "0"}


def test_trajectory_images(smoke_run):
    d = smoke_run / "predict" / "p000_v0"
    preds = sorted(d.glob("pred_*.pgm"))
    assert len(preds) == 9
    assert len(list(d.glob("progression_*.pgm"))) == 9
    img, comments = read_pgm(preds[0])
    assert img.shape == (32, 32)
    assert comments[0].startswith("config_hash=")


def test_predict_explicit_targets_and_errors(smoke_run):
    assert run("predict", "--config", SMOKE, "--out", smoke_run, "--patient", 1, "--targets", "90,95") == 0
    assert len(list((smoke_run / "predict" / "p001_v0").glob("pred_*.pgm"))) == 2
    assert run("predict", "--config", SMOKE, "--out", smoke_run, "--patient", 1, "--targets", "1") == 1
    assert run("predict", "--config", SMOKE, "--out", smoke_run, "--patient", 999) == 1


def test_gen_data_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--config", SMOKE, "--out", tmp_path / name) == 0
    for f in ("cohort/cohort.json", "cohort/scans.bin", "split.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_exit_codes(tmp_path):
    assert run("train-ae", "--config", SMOKE, "--out", tmp_path / "empty") == 2
    assert run("evaluate", "--config", SMOKE, "--out", tmp_path / "empty") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"flow": {"dtt": 1}}')
    assert run("gen-data", "--config", bad, "--out", tmp_path / "x") == 1
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == 2
    assert run("gen-data", "--no-arc", "--cosine", "--out", tmp_path / "x") == 1


def test_flow_stage_refuses_mismatched_autoencoder(smoke_run):
    assert run("train-flow", "--config", SMOKE, "--out", smoke_run, "--no-rank") == 1
