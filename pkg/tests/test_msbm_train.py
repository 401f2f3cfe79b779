from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from msbm.common.errors import TrainingAborted
from msbm.control_net import ControlFunction, RegressionBatch, loss_and_grad
from msbm.msbm_train import (
    MsbmConfig,
    MsbmTrainer,
    TrainReport,
    init_couplings,
    make_training_batch,
    refresh_couplings,
    run_msbm,
    run_naive_baseline,
    run_two_marginal,
    sample_times,
)
from msbm.reference_bridge import ReferenceProcess
from msbm.time_grid import MarginalDataset, TimeGrid


def _rows_of(rows, samples):
    return all(np.any(np.all(samples == r, axis=1)) for r in rows)


def test_point_masses_give_the_single_pair(rng):
    ds = MarginalDataset.from_arrays([0.0, 1.0], [[[0.5]], [[2.5]]])
    (coupling,) = init_couplings(ds, rng)
    np.testing.assert_array_equal(coupling.left, [[0.5]])
    np.testing.assert_array_equal(coupling.right, [[2.5]])


def test_init_couplings_subsample_without_replacement(three_times, rng):
    couplings = init_couplings(three_times, rng)
    assert [c.size for c in couplings] == [40, 30]
    assert [c.index for c in couplings] == [1, 2]
    # the smaller side is used whole, permuted
    np.testing.assert_array_equal(np.sort(couplings[0].left[:, 0]), np.sort(three_times.samples(0)[:, 0]))
    assert len(np.unique(couplings[0].right[:, 0])) == 40
    assert _rows_of(couplings[0].right, three_times.samples(1))
    assert _rows_of(couplings[1].left, three_times.samples(1))


def test_time_sampling_is_uniform_over_the_grid(rng):
    t = sample_times(TimeGrid((0.0, 1.0, 2.0)), 10_000, "forward", rng)
    assert np.mean(t < 1.0) == pytest.approx(0.5, abs=0.02)
    assert t.min() >= 0.0 and t.max() < 2.0


def test_time_sampling_avoids_the_singular_end(rng):
    grid = TimeGrid((0.0, 1.0, 2.0))
    forward = sample_times(grid, 50_000, "forward", rng)
    assert np.min(np.abs(forward - 1.0)[forward < 1.0], initial=1.0) >= 1e-6
    backward = sample_times(grid, 50_000, "backward", rng)
    assert np.min(np.abs(backward - 1.0)[backward > 1.0], initial=1.0) >= 1e-6


def test_training_batch_targets(rng, brownian):
    ds = MarginalDataset.from_arrays([0.0, 1.0, 3.0], [[[0.0]], [[2.0]], [[-2.0]]])
    couplings = init_couplings(ds, rng)
    t = np.array([0.5, 0.25, 2.0])

    forward = make_training_batch(couplings, ds.grid, brownian, 3, "forward", rng, t=t)
    assert [c.size for c in forward] == [2, 1]
    np.testing.assert_allclose(forward[0].target, (2.0 - forward[0].x) / (1.0 - forward[0].t[:, None]))
    np.testing.assert_allclose(forward[1].target, (-2.0 - forward[1].x) / 1.0)

    backward = make_training_batch(couplings, ds.grid, brownian, 3, "backward", rng, t=t)
    np.testing.assert_allclose(backward[0].target, (0.0 - backward[0].x) / backward[0].t[:, None])
    np.testing.assert_allclose(backward[1].target, (2.0 - backward[1].x) / 1.0)


def test_training_batch_is_thread_independent(three_times, brownian):
    couplings = init_couplings(three_times, np.random.default_rng(0))
    serial = make_training_batch(couplings, three_times.grid, brownian, 64, "forward", np.random.default_rng(5))
    with ThreadPoolExecutor(4) as pool:
        threaded = make_training_batch(
            couplings, three_times.grid, brownian, 64, "forward", np.random.default_rng(5), pool=pool
        )
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.target, b.target)


def test_aggregate_loss_is_the_sum_over_intervals(three_times, brownian, rng):
    couplings = init_couplings(three_times, rng)
    chunks = make_training_batch(couplings, three_times.grid, brownian, 50, "backward", rng)
    ctrl = ControlFunction(MsbmConfig(hidden=8, depth=1, embedding=4).architecture(1))
    ctrl = ctrl.with_params(ctrl.params + 0.1 * rng.normal(size=ctrl.params.shape))
    whole, whole_grad = loss_and_grad(ctrl, RegressionBatch.concat(chunks))
    parts = [loss_and_grad(ctrl, c, normalizer=50) for c in chunks]
    assert sum(p[0] for p in parts) == pytest.approx(whole, rel=1e-10)
    np.testing.assert_allclose(sum(p[1] for p in parts), whole_grad, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_refresh_anchors_at_data(three_times, quick_config, direction, rng):
    ctrl = ControlFunction(quick_config.architecture(1), rng=rng)
    ctrl = ctrl.with_params(ctrl.params + 0.05 * rng.normal(size=ctrl.params.shape))
    couplings = refresh_couplings(ctrl, three_times, direction, quick_config, quick_config.reference(), iteration=3)
    for c in couplings:
        if direction == "forward":
            assert _rows_of(c.left, three_times.samples(c.index - 1))
        else:
            assert _rows_of(c.right, three_times.samples(c.index))
    assert [c.size for c in couplings] == [40, 30]


def test_zero_control_refresh_is_the_identity(three_times, quick_config):
    cfg = replace(quick_config, sigma=1e-9)
    ctrl = ControlFunction(cfg.architecture(1))
    for direction in ("forward", "backward"):
        for c in refresh_couplings(ctrl, three_times, direction, cfg, cfg.reference()):
            np.testing.assert_allclose(c.left, c.right, atol=1e-6)


def test_refresh_does_not_depend_on_processing_order(three_times, quick_config, rng):
    ctrl = ControlFunction(quick_config.architecture(1), rng=rng)
    ref = quick_config.reference()
    serial = refresh_couplings(ctrl, three_times, "backward", quick_config, ref, iteration=1)
    with ThreadPoolExecutor(8) as pool:
        threaded = refresh_couplings(ctrl, three_times, "backward", quick_config, ref, iteration=1, pool=pool)
    for a, b in zip(serial, threaded):
        np.testing.assert_array_equal(a.left, b.left)
        np.testing.assert_array_equal(a.right, b.right)
    other = refresh_couplings(ctrl, three_times, "backward", quick_config, ref, iteration=2)
    assert not np.array_equal(serial[0].left, other[0].left)


def test_naive_refresh_reads_endpoints_off_one_path(three_times, quick_config):
    cfg = replace(quick_config, mode="naive", sigma=1e-9)
    ctrl = ControlFunction(cfg.architecture(1))
    first, second = refresh_couplings(ctrl, three_times, "forward", cfg, cfg.reference())
    # zero control: the t_0 rows are carried unchanged along the whole grid
    np.testing.assert_array_equal(first.right, second.left)
    assert _rows_of(first.left, three_times.samples(0))
    assert not _rows_of(second.left, three_times.samples(1))


def test_outer_iteration_order(three_times, quick_config, monkeypatch):
    trainer = MsbmTrainer(three_times, replace(quick_config, track_metrics=False))
    calls = []
    for name in ("fit_backward", "refresh_backward", "fit_forward", "refresh_forward"):
        original = getattr(trainer, name)
        monkeypatch.setattr(trainer, name, lambda original=original, name=name: calls.append(name) or original())
    trainer.step()
    assert calls == ["fit_backward", "refresh_backward", "fit_forward", "refresh_forward"]


def test_report_shapes(three_times, quick_config):
    v, u, report = run_msbm(three_times, quick_config)
    assert report.iterations_completed == 2
    assert [len(c) for c in report.forward_loss] == [5, 5]
    assert [len(c) for c in report.backward_loss] == [5, 5]
    assert len(report.marginal_w2) == 3
    assert all(len(row) == 2 for row in report.marginal_w2)
    assert report.marginal_times == [1.0, 2.0]
    assert len(report.phase_seconds["fit_forward"]) == 2
    assert len(report.phase_seconds["metrics"]) == 3
    assert report.total_seconds() > 0
    assert len(report.mean_loss("backward")) == 2
    assert TrainReport.from_dict(report.to_dict()) == report
    assert v.role == "forward" and u.role == "backward"


def test_moving_average():
    np.testing.assert_allclose(TrainReport.moving_average([3.0, 2.0, 1.0, 0.0]), [2.0, 1.0])
    np.testing.assert_allclose(TrainReport.moving_average([1.0]), [1.0])


def _same_run(a, b):
    (v_a, u_a, report_a), (v_b, u_b, report_b) = a, b
    np.testing.assert_array_equal(v_a.params, v_b.params)
    np.testing.assert_array_equal(u_a.params, u_b.params)
    assert report_a.forward_loss == report_b.forward_loss
    assert report_a.backward_loss == report_b.backward_loss
    assert report_a.marginal_w2 == report_b.marginal_w2


def test_thread_count_does_not_change_the_result(three_times, quick_config):
    _same_run(
        run_msbm(three_times, replace(quick_config, threads=1)),
        run_msbm(three_times, replace(quick_config, threads=8)),
    )


def test_fixed_seed_reproduces_parameters_and_report(three_times, quick_config):
    _same_run(run_msbm(three_times, quick_config), run_msbm(three_times, quick_config))
    _, _, other = run_msbm(three_times, replace(quick_config, seed=1))
    assert other.forward_loss != run_msbm(three_times, quick_config)[2].forward_loss


def test_two_marginal_entry_point_is_the_same_code_path(rng, quick_config):
    x0, x1 = rng.normal(0, 0.1, (50, 1)), rng.normal(2, 0.1, (60, 1))
    v_a, u_a, rep_a = run_two_marginal(x0, x1, quick_config)
    v_b, u_b, rep_b = run_msbm(MarginalDataset.from_arrays([0.0, 1.0], [x0, x1]), quick_config)
    np.testing.assert_array_equal(v_a.params, v_b.params)
    np.testing.assert_array_equal(u_a.params, u_b.params)
    assert rep_a.forward_loss == rep_b.forward_loss


def test_naive_equals_msbm_with_a_single_interval(rng, quick_config):
    ds = MarginalDataset.from_arrays([0.0, 1.0], [rng.normal(0, 0.1, (30, 1)), rng.normal(1, 0.1, (45, 1))])
    v_a, u_a, _ = run_msbm(ds, quick_config)
    v_b, u_b, _ = run_naive_baseline(ds, replace(quick_config, mode="naive"))
    np.testing.assert_array_equal(v_a.params, v_b.params)
    np.testing.assert_array_equal(u_a.params, u_b.params)


def test_entry_points_check_mode(three_times, quick_config):
    with pytest.raises(ValueError):
        run_msbm(three_times, replace(quick_config, mode="naive"))
    with pytest.raises(ValueError):
        run_naive_baseline(three_times, quick_config)


def test_divergence_aborts_with_partial_report(three_times, quick_config, monkeypatch):
    import msbm.msbm_train as msbm_train

    def broken(ctrl, batch, normalizer=None):
        return float("nan"), np.zeros_like(ctrl.params)

    monkeypatch.setattr(msbm_train, "loss_and_grad", broken)
    with pytest.raises(TrainingAborted) as info:
        run_msbm(three_times, quick_config)
    report = info.value.report
    assert report.iterations_completed == 0
    assert "non-finite backward loss" in report.aborted
    assert len(report.marginal_w2) == 1


def test_holdout_is_excluded_from_training(three_times, quick_config):
    trainer = MsbmTrainer(three_times, replace(quick_config, holdout=(1,)))
    assert trainer.grid.times == (0.0, 2.0)
    assert len(trainer.couplings) == 1
    assert trainer.metadata()["holdout"] == [1]
    assert trainer.metadata()["source_times"] == [0.0, 1.0, 2.0]


def test_checkpoint_carries_training_metadata(tmp_path, three_times, quick_config):
    from msbm.control_net import load_checkpoint

    trainer = MsbmTrainer(three_times, replace(quick_config, outer_iterations=1, track_metrics=False))
    trainer.run()
    checkpoint = load_checkpoint(trainer.save(tmp_path / "ckpt.npz", label="test"))
    assert checkpoint.meta["iteration"] == 1
    assert checkpoint.meta["label"] == "test"
    assert checkpoint.meta["sigma"] == quick_config.sigma
    np.testing.assert_array_equal(checkpoint.controls["forward"].params, trainer.forward_ctrl.params)


def test_presets():
    cfg = MsbmConfig.from_dict({"preset": "petal", "seed": 3, "holdout": [2]})
    assert (cfg.learning_rate, cfg.outer_iterations, cfg.inner_steps) == (1e-3, 20, 1000)
    assert cfg.steps_per_interval == 30 and cfg.seed == 3 and cfg.holdout == (2,)
    assert MsbmConfig.from_dict({"preset": "eb100", "learning_rate": 5e-4}).learning_rate == 5e-4
    with pytest.raises(ValueError):
        MsbmConfig.from_dict({"preset": "nonexistent"})
    with pytest.raises(ValueError):
        MsbmConfig(sigma=0.0)
    assert MsbmConfig.from_dict(cfg.snapshot()) == cfg


@pytest.mark.parametrize(
    "name, dim, budget",
    [
        ("petal", 2, 1.28e6),
        ("eb100", 100, 1.28e6),
        ("cite", 100, 1.28e6),
        ("multi", 100, 1.28e6),
        ("hesc", 5, 24e3),
        ("eb5", 5, 24e3),
    ],
)
def test_preset_network_size(name, dim, budget):
    arch = MsbmConfig.from_dict({"preset": name}).architecture(dim)
    assert arch.n_params == pytest.approx(budget, rel=0.1)


def test_config_reference_and_sim(quick_config):
    assert quick_config.reference() == ReferenceProcess(0.5)
    assert quick_config.sim_config(seed=7).seed == 7
    assert quick_config.sim_config().steps_per_interval == 5
