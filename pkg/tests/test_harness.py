import csv
import json
import os

import numpy as np
import pytest

from pets import cli, dynmodel, harness

TINY = {
    "env": "cartpole",
    "model": {"kind": "PE", "ensemble_size": 2, "hidden": [8], "epochs": 2, "batch_size": 16},
    "planner": {"horizon": 3, "population": 20, "iterations": 2, "elites": 5, "particles": 4,
                "propagation": "TS1"},
    "trials": 3,
    "task_horizon": 10,
    "seeds": [0],
}

DETERMINISTIC_FILES = ("trials.csv", "steps.csv", "dataset.csv", "manifest.json")


def tiny(**kw):
    d = json.loads(json.dumps(TINY))
    d.update(kw)
    return harness.ExperimentConfig.from_dict(d)


def test_config_validation_and_hash(tmp_path):
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"trials": 0})
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"seeds": []})
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"colour": "red"})
    with pytest.raises(KeyError):
        harness.ExperimentConfig.from_dict({"env": "hopper"})
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict({"grid": ["XX-E"]})
    a, b = tiny(output_dir="x"), tiny(output_dir="y")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != tiny(trials=4).config_hash()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    assert harness.ExperimentConfig.from_json(path).config_hash() == a.config_hash()


def test_derive_seed_stable_and_distinct():
    assert harness.derive_seed(0, "env") == harness.derive_seed(0, "env")
    seeds = {harness.derive_seed(m, lab, k) for m in range(3) for lab in ("train", "trial") for k in range(5)}
    assert len(seeds) == 30


def test_single_trial_is_random_only():
    logs = harness.run_experiment(tiny(trials=1))
    tl = logs[0]
    assert tl.complete and len(tl.trials) == 1
    rec = tl.trials[0]
    assert np.isnan(rec.model_mse) and rec.train_s == 0.0 and rec.plan_s == 0.0
    assert len(rec.rewards) == 10


def test_run_writes_logs_and_dataset_grows(tmp_path):
    harness.run_experiment(tiny(output_dir=str(tmp_path)))
    d = tmp_path / "seed_0"
    for name in DETERMINISTIC_FILES + ("timing.csv",):
        assert (d / name).exists()
    ds = dynmodel.TransitionDataset.from_csv(d / "dataset.csv")
    assert len(ds) == 3 * 10
    with open(d / "trials.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["trial"]) for r in rows] == [0, 1, 2]
    assert all(np.isfinite(float(r["model_nll"])) for r in rows[1:])
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["complete"] and manifest["config_hash"] == tiny().config_hash()
    for name in ("curves.csv", "band.csv", "curves.svg"):
        assert (tmp_path / name).exists()


def test_byte_identical_logs(tmp_path):
    for sub in ("a", "b"):
        harness.run_experiment(tiny(output_dir=str(tmp_path / sub), seeds=[0, 1], trace=True))
    for seed in (0, 1):
        for name in DETERMINISTIC_FILES:
            a = (tmp_path / "a" / f"seed_{seed}" / name).read_bytes()
            b = (tmp_path / "b" / f"seed_{seed}" / name).read_bytes()
            assert a == b, name
    for name in ("curves.csv", "band.csv", "curves.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_partial_log_on_error(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(dynmodel, "train", boom)
    logs = harness.run_experiment(tiny(output_dir=str(tmp_path)))
    assert not logs[0].complete and "diverged" in logs[0].error
    assert len(logs[0].trials) == 1
    manifest = json.loads((tmp_path / "seed_0" / "manifest.json").read_text())
    assert manifest["complete"] is False


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = tiny(trials=1)
    harness.run_experiment(cfg)
    assert (tmp_path / cfg.config_hash() / "seed_0" / "trials.csv").exists()


def test_grid_labels():
    assert harness.canonical_cell("D-TS1") == "D-E"
    assert harness.canonical_cell("PE-TS∞") == "PE-TSinf"
    assert harness.parse_cell("DE-MM") == ("DE", "MM")
    assert len(harness.DEFAULT_GRID) == 14


def test_ablation_counting_and_order(tmp_path):
    cfg = tiny(trials=2, output_dir=str(tmp_path), grid=["D-E", "D-TS1", "PE-E", "PE-TS1"])
    result = harness.run_ablation(cfg)
    assert len(result["cells"]) == 4 and len(result["summary"]) == 4
    means = [r["mean_final"] for r in result["summary"]]
    assert means == sorted(means, reverse=True)
    runs_as = {r["cell"]: r["runs_as"] for r in result["summary"]}
    assert runs_as["D-TS1"] == "D-E"
    # D-TS1 performs the D-E run, so their results coincide
    assert np.array_equal(result["cells"]["D-TS1"][0].rewards, result["cells"]["D-E"][0].rewards)
    with open(tmp_path / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_summary_tie_break():
    rows = [{"mean_final": 1.0, "median_final": 0.5}, {"mean_final": 1.0, "median_final": 0.9},
            {"mean_final": 2.0, "median_final": 0.0}]
    rows.sort(key=lambda r: (-r["mean_final"], -r["median_final"]))
    assert [r["median_final"] for r in rows] == [0.0, 0.9, 0.5]


def test_horizon_sweep(tmp_path):
    single = harness.run_experiment(tiny(trials=2))
    sweep = harness.run_horizon_sweep(tiny(trials=2, output_dir=str(tmp_path)), [3])
    assert np.array_equal(sweep[3][0].rewards, single[0].rewards)
    with open(tmp_path / "horizon_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and list(rows[0]) == ["horizon", "trial", "median", "p05", "p95"]


def test_percentile_band_small_n():
    v = np.array([[3.0], [1.0], [4.0], [1.5], [9.0]])
    med, lo, hi = harness.percentile_band(v)
    assert med[0] == 3.0 and lo[0] == 1.0 and hi[0] == 9.0


def test_max_so_far():
    assert harness.max_so_far([1, 3, 2]).tolist() == [1, 3, 3]


def test_export_contract_and_idempotence(tmp_path):
    band = harness.export_curves({7: np.array([1.0, 3.0, 2.0])}, tmp_path)
    assert np.array_equal(band["lo"], band["hi"]) and np.array_equal(band["mean"], band["hi"])
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "trial,seed,reward,reward_maxsofar"
    assert lines[3] == "2,7,2.0,3.0"
    assert (tmp_path / "curves.svg").read_text().startswith("<svg")

    run = tmp_path / "run"
    harness.run_experiment(tiny(trials=2, seeds=[0, 1], output_dir=str(run)))
    before = {n: (run / n).read_bytes() for n in ("curves.csv", "band.csv", "curves.svg")}
    harness.export_curves(str(run), str(run))
    harness.export_curves(str(run), str(run))
    assert before == {n: (run / n).read_bytes() for n in before}


def test_cli_run_and_export(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(TINY, trials=1)))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(cfg), "--output-dir", str(out)]) == 0
    assert (out / "seed_0" / "trials.csv").exists()
    assert cli.main(["export", "--run-dir", str(out)]) == 0
    assert cli.main(["sweep-horizon", "--config", str(cfg), "--output-dir", str(tmp_path / "sw"),
                     "--horizons", "2,3"]) == 0
    assert os.path.exists(tmp_path / "sw" / "h_2" / "seed_0" / "trials.csv")


def test_cli_exit_code_on_failure(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("no")

    monkeypatch.setattr(dynmodel, "train", boom)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 1
