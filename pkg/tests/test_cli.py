import json
from pathlib import Path

import numpy as np
import pytest

from msbm.cli import EXIT_BAD_INPUT, EXIT_DIVERGED, ExperimentConfig, main
from msbm.control_net import load_checkpoint
from msbm.sde_sim import TrajectoryBatch


@pytest.fixture
def experiment(tmp_path):
    document = {
        "dataset": {
            "path": str(tmp_path / "data"),
            "synthetic": {"kind": "gaussian_chain", "n": 40, "noise": 0.1, "seed": 1},
        },
        "split": 0.5,
        "train": {
            "outer_iterations": 2,
            "inner_steps": 3,
            "batch_size": 16,
            "sigma": 0.5,
            "steps_per_interval": 3,
            "hidden": 8,
            "depth": 1,
            "embedding": 4,
            "metric_samples": 20,
        },
        "sim": {"steps_per_interval": 3},
        "metrics": {"projections": 8},
        "protocols": ["from_t0", "from_prev"],
        "seeds": [0, 1],
        "out": str(tmp_path / "runs"),
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(document))
    return path


def _result(capsys) -> Path:
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def _train(experiment, capsys, *extra) -> Path:
    assert main(["train", "--config", str(experiment), *extra]) == 0
    return _result(capsys)


def test_generate_writes_snapshot_directory(experiment, tmp_path, capsys):
    assert main(["generate", "--config", str(experiment)]) == 0
    assert _result(capsys) == tmp_path / "data"
    manifest = json.loads((tmp_path / "data" / "grid.json").read_text())
    assert manifest["times"] == [0.0, 1.0, 2.0]


def test_train_evaluate_compare(experiment, capsys):
    msbm_run = _train(experiment, capsys)
    naive_run = _train(experiment, capsys, "--mode", "naive", "--seed", "3")

    checkpoint = load_checkpoint(msbm_run / "checkpoint.npz")
    assert checkpoint.meta["mode"] == "msbm" and checkpoint.meta["iteration"] == 2
    report = json.loads((msbm_run / "train_report.json").read_text())
    assert report["report"]["iterations_completed"] == 2
    assert len(report["report"]["marginal_w2"]) == 3
    assert report["config"]["train"]["outer_iterations"] == 2
    assert report["build"].startswith("msbm")
    assert (msbm_run / "config_snapshot.json").is_file()
    assert load_checkpoint(naive_run / "checkpoint.npz").meta["config"]["seed"] == 3

    assert main(["evaluate", "--config", str(experiment), str(msbm_run / "checkpoint.npz")]) == 0
    eval_run = _result(capsys)
    evaluation = json.loads((eval_run / "eval_report.json").read_text())
    assert set(evaluation["summary"]) == {"from_t0", "from_prev"}
    assert evaluation["summary"]["from_t0"]["times"] == [1.0, 2.0]
    assert len(evaluation["reports"]["from_prev"]) == 2
    comment, header = (eval_run / "from_t0_summary.csv").read_text().splitlines()[:2]
    assert header.startswith("t,w1_mean,w1_std,w2_mean")
    assert comment.startswith("# msbm") and evaluation["config_sha256"] in comment
    assert (eval_run / "from_prev_run1_seed1.csv").is_file()

    assert main(
        ["compare", "--config", str(experiment), str(msbm_run / "checkpoint.npz"), str(naive_run / "checkpoint.npz")]
    ) == 0
    compare_run = _result(capsys)
    comment, header = (compare_run / "compare.csv").read_text().splitlines()[:2]
    assert comment.startswith("# msbm")
    assert header.startswith("t,w1_msbm,w1_naive,w2_msbm,w2_naive")
    paths = TrajectoryBatch.from_csv(compare_run / "trajectories_naive.csv")
    np.testing.assert_allclose(paths.times, [0.0, 1.0, 2.0])


def _metric_documents(experiment, capsys, out) -> tuple[dict, dict]:
    run = _train(experiment, capsys, "--out", str(out))
    assert main(["evaluate", "--config", str(experiment), "--out", str(out), str(run / "checkpoint.npz")]) == 0
    evaluation = json.loads((_result(capsys) / "eval_report.json").read_text())
    training = json.loads((run / "train_report.json").read_text())["report"]
    return training, evaluation


def test_runs_with_fixed_seeds_are_identical(experiment, tmp_path, capsys):
    first_train, first_eval = _metric_documents(experiment, capsys, tmp_path / "first")
    second_train, second_eval = _metric_documents(experiment, capsys, tmp_path / "second")
    for key in ("backward_loss", "forward_loss", "marginal_w2"):
        assert first_train[key] == second_train[key]
    assert first_eval["reports"] == second_eval["reports"]
    assert first_eval["summary"] == second_eval["summary"]


def test_checkpoint_every(experiment, capsys):
    run = _train(experiment, capsys, "--checkpoint-every", "1")
    assert (run / "checkpoint_iter1.npz").is_file()
    assert load_checkpoint(run / "checkpoint_iter2.npz").meta["iteration"] == 2


def test_simulate_exports_paths(experiment, capsys):
    run = _train(experiment, capsys)
    assert main(["simulate", "--config", str(experiment), str(run / "checkpoint.npz"), "--direction", "backward"]) == 0
    paths = TrajectoryBatch.from_csv(_result(capsys) / "trajectories.csv")
    np.testing.assert_allclose(paths.times, [2.0, 1.0, 0.0])
    assert paths.batch == 20


def test_leave_one_out_needs_a_held_out_checkpoint(experiment, tmp_path, capsys):
    run = _train(experiment, capsys)
    document = json.loads(experiment.read_text())
    document["protocols"] = ["leave_one_out:1"]
    loo = tmp_path / "loo.json"
    loo.write_text(json.dumps(document))
    assert main(["evaluate", "--config", str(loo), str(run / "checkpoint.npz")]) == EXIT_BAD_INPUT
    assert "held out" in capsys.readouterr().err

    document["train"]["holdout"] = [1]
    loo.write_text(json.dumps(document))
    held_out = _train(loo, capsys, "--out", str(tmp_path / "held_out"))
    assert main(["evaluate", "--config", str(loo), str(held_out / "checkpoint.npz")]) == 0


def test_bad_input_exit_code(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_BAD_INPUT
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"synthetic": {}}, "learning_rate": 1.0}))
    assert main(["train", "--config", str(bad)]) == EXIT_BAD_INPUT
    assert "unknown config keys" in capsys.readouterr().err
    bad.write_text(json.dumps({"dataset": {"path": str(tmp_path / "nowhere")}}))
    assert main(["train", "--config", str(bad)]) == EXIT_BAD_INPUT


def test_divergence_exit_code(experiment, tmp_path, monkeypatch, capsys):
    import msbm.msbm_train as msbm_train

    monkeypatch.setattr(msbm_train, "loss_and_grad", lambda ctrl, batch, normalizer=None: (np.inf, ctrl.params * 0))
    assert main(["train", "--config", str(experiment)]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
    (report_file,) = (tmp_path / "runs").rglob("train_report.json")
    assert "non-finite" in json.loads(report_file.read_text())["report"]["aborted"]


def test_overrides():
    cfg = ExperimentConfig(dataset={"synthetic": {}}, seeds=(0, 1))
    cfg = cfg.with_overrides(seed=5, mode="naive", out="elsewhere")
    assert cfg.train.seed == 5 and cfg.seeds == (5,)
    assert cfg.train.mode == "naive" and cfg.out == "elsewhere"
    assert ExperimentConfig.from_dict(cfg.snapshot()).snapshot() == cfg.snapshot()
    with pytest.raises(ValueError):
        ExperimentConfig(dataset={})
    with pytest.raises(ValueError):
        ExperimentConfig(dataset={"synthetic": {}}, protocols=("sideways",))


@pytest.mark.parametrize("document", sorted((Path(__file__).parents[1] / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(document):
    cfg = ExperimentConfig.load(document)
    assert cfg.files == [str(document)]
    assert cfg.train.outer_iterations >= 1
