import json
from pathlib import Path

import numpy as np
import pytest
import torch

from shiftup.experiment import (ConfigError, ExperimentConfig, report,
                                resolve_dataset, run_experiment)
from shiftup.models import DARNModel


def micro_config(tmp_path, **overrides) -> ExperimentConfig:
    doc = {
        "name": "micro",
        "dataset": {"generator": "census", "rows": 1500, "seed": 0},
        "family": "darn",
        "model": {"hidden": [24, 24], "seed": 0},
        "train": {"epochs": 4, "batch_size": 256, "base_lr": 2e-3},
        "stream": {"fraction": 0.2, "n_batches": 1, "drift": True},
        "detector": {"n_resamples": 100, "resample_size": 32},
        "update": {"epochs": 2, "batch_size": 256, "lr": 5e-4},
        "workload": {"n": 10, "style": "naru", "filter_count_range": [2, 5]},
        "policies": ["ddup", "stale"],
        "seed": 0,
        "output_dir": str(tmp_path / "runs"),
    }
    doc.update(overrides)
    return ExperimentConfig.from_json(doc)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"family": "mlp"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"policies": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"policies": ["nonsense"]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"bogus_key": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"dataset": {"table": "/nope.csv",
                                                "schema": "/nope.json"}})


def test_config_json_roundtrip(tmp_path):
    cfg = micro_config(tmp_path)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()


def test_resolve_dataset_generators(tmp_path):
    assert resolve_dataset(micro_config(tmp_path)).row_count == 1500
    mog = micro_config(tmp_path, dataset={"generator": "mog",
                                          "rows_per_category": 50})
    assert resolve_dataset(mog).row_count == 500
    toy = micro_config(tmp_path, dataset={"generator": "toy"})
    assert resolve_dataset(toy).row_count == 960
    with pytest.raises(ConfigError):
        resolve_dataset(micro_config(tmp_path, dataset={"generator": "nope"}))


def test_resolve_dataset_from_files(tmp_path):
    base = resolve_dataset(micro_config(tmp_path))
    base.to_csv(tmp_path / "t.csv")
    base.schema.save(tmp_path / "s.json")
    cfg = micro_config(tmp_path, dataset={"table": str(tmp_path / "t.csv"),
                                          "schema": str(tmp_path / "s.json")})
    loaded = resolve_dataset(cfg)
    assert loaded.row_count == base.row_count


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = micro_config(tmp)
    return run_experiment(cfg), cfg


def test_run_directory_is_self_describing(micro_run):
    run_dir, cfg = micro_run
    stored = json.loads((run_dir / "config.json").read_text())
    assert stored == cfg.to_json()
    for name in ("schema.json", "workload.jsonl", "model_0.pt",
                 "summary.csv", "timings.csv"):
        assert (run_dir / name).exists(), name


def test_stale_policy_never_changes_the_model(micro_run):
    run_dir, _ = micro_run
    records = [json.loads(line)
               for line in (run_dir / "steps" / "stale.jsonl").read_text().splitlines()]
    assert [r["branch"] for r in records] == ["train", "none"]
    losses = {r["t"]: r["loss_old"] for r in records}
    assert losses[0] == losses[1]  # identical parameters across steps


def test_ddup_policy_records_decisions(micro_run):
    run_dir, _ = micro_run
    records = [json.loads(line)
               for line in (run_dir / "steps" / "ddup.jsonl").read_text().splitlines()]
    step = records[1]
    assert step["decision"] in ("IND", "OOD")
    assert step["branch"] in ("fine_tune", "distill")
    assert step["d"] is not None and step["threshold"] is not None
    assert step["wall_time"] > 0
    assert step["metrics"]["summary"]["count"] == 10


def test_report_is_deterministic(micro_run):
    run_dir, _ = micro_run
    first = {p.name: p.read_bytes() for p in report(run_dir) if p.suffix == ".csv"}
    second = {p.name: p.read_bytes() for p in report(run_dir) if p.suffix == ".csv"}
    assert first == second
    assert "summary.csv" in first


def test_report_requires_run_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(tmp_path / "missing")


def test_saved_model_is_loadable(micro_run):
    run_dir, _ = micro_run
    model = DARNModel.load(run_dir / "model_0.pt")
    assert model.meta["row_count"] == 1500


def test_detector_sweep_artifacts(tmp_path):
    cfg = micro_config(
        tmp_path, name="sweep",
        policies=["stale"], workload={"n": 5, "style": "naru",
                                      "filter_count_range": [2, 4]},
        detector_sweep={"batch_sizes": [16, 64], "n_batches": 20,
                        "resample_size": 16, "n_resamples": 100},
    )
    run_dir = run_experiment(cfg)
    rates = json.loads((run_dir / "detector_rates.json").read_text())
    assert [r["batch_size"] for r in rates] == [16, 64]
    assert all(0 <= r["fpr"] <= 1 and 0 <= r["fnr"] <= 1 for r in rates)
    assert (run_dir / "detector_rates.csv").exists()
    assert (run_dir / "plots" / "detector_rates.png").exists()
