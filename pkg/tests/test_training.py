"""Training-loop tests: metric fixtures, schedule endpoints, determinism."""

import math

import numpy as np
import pytest

from gito.autodiff import tensor
from gito.data import generate_poisson_dataset
from gito.model import ModelConfig, build_model
from gito.training import (
    AdamW,
    TrainConfig,
    TrainingDiverged,
    ablation_harness,
    clip_gradients,
    evaluate,
    evaluate_super_resolution,
    onecycle_lr,
    relative_l2,
    relative_l2_loss,
    train,
)
from helpers import grad_check


def _desk_config(**overrides):
    base = dict(
        hidden_size=8, n_heads=2, n_experts=2, n_attention_layers=1, n_hgt_blocks=1,
        mlp_layers=1, precision="float64", query_graph="knn:3", input_graph="knn:3",
        input_channels=(1,), output_field_count=1, fusion_ffn_mult=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- relative L2 -----------------------------------------------------------------


def test_relative_l2_fixtures():
    rng = np.random.default_rng(0)
    truth = rng.standard_normal((20, 3))
    _, exact = relative_l2(truth, truth)
    _, zero = relative_l2(np.zeros_like(truth), truth)
    _, double = relative_l2(2.0 * truth, truth)
    assert exact == 0.0
    assert zero == 1.0
    assert abs(double - 1.0) < 1e-12


def test_relative_l2_zero_norm_channel_names_channel():
    truth = np.zeros((4, 2))
    truth[:, 0] = 1.0
    with pytest.raises(ValueError, match="channel 1"):
        relative_l2(np.ones((4, 2)), truth)


def test_relative_l2_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        relative_l2(np.ones((3, 1)), np.ones((4, 1)))


def test_loss_matches_metric_and_is_differentiable():
    rng = np.random.default_rng(1)
    pred = tensor(rng.standard_normal((10, 2)), requires_grad=True)
    truth = rng.standard_normal((10, 2)) + 1.0
    loss = relative_l2_loss(pred, tensor(truth))
    _, metric = relative_l2(pred.data, truth)
    assert abs(loss.item() - metric) < 1e-12

    def f():
        return relative_l2_loss(pred, tensor(truth))

    grad_check(f, {"pred": pred}, rtol=1e-5)


# -- OneCycle ---------------------------------------------------------------------


def test_onecycle_endpoints_and_peak():
    cfg = TrainConfig(max_lr=1e-2, pct_start=0.25, div_factor=25, final_div_factor=1e4)
    total = 200
    assert onecycle_lr(0, total, cfg) == cfg.max_lr / cfg.div_factor
    assert onecycle_lr(0.25 * total, total, cfg) == cfg.max_lr
    assert abs(onecycle_lr(total, total, cfg) - cfg.max_lr / cfg.final_div_factor) < 1e-12


def test_onecycle_monotone_up_then_down():
    cfg = TrainConfig(max_lr=1e-3, pct_start=0.3)
    total = 100
    values = [onecycle_lr(s, total, cfg) for s in range(total + 1)]
    peak = int(0.3 * total)
    assert all(a <= b + 1e-18 for a, b in zip(values[:peak], values[1 : peak + 1]))
    assert all(a >= b - 1e-18 for a, b in zip(values[peak:-1], values[peak + 1 :]))


def test_onecycle_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        onecycle_lr(-1, 10, TrainConfig())


# -- optimizer / clipping -----------------------------------------------------------


def test_clip_preserves_direction():
    rng = np.random.default_rng(2)
    params = [tensor(rng.standard_normal(5), requires_grad=True) for _ in range(3)]
    for p in params:
        p.grad = rng.standard_normal(5)
    before = np.concatenate([p.grad for p in params]).copy()
    norm = clip_gradients(params, max_norm=0.5)
    after = np.concatenate([p.grad for p in params])
    assert norm > 0.5
    np.testing.assert_allclose(after, before * (0.5 / norm), rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(after), 0.5, rtol=1e-12)


def test_clip_leaves_small_gradients_alone():
    p = tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([0.1, 0.0, 0.0])
    clip_gradients([p], max_norm=1.0)
    np.testing.assert_array_equal(p.grad, [0.1, 0.0, 0.0])


def test_adamw_converges_on_quadratic():
    p = tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.0)
    from gito.autodiff import backward

    for _ in range(400):
        p.zero_grad()
        backward((p * p).sum())
        opt.step(0.05)
    np.testing.assert_allclose(p.data, 0.0, atol=1e-3)


def test_adamw_skips_parameters_without_gradients():
    p = tensor(np.ones(2), requires_grad=True)
    q = tensor(np.ones(2), requires_grad=True)
    p.grad = np.ones(2)
    opt = AdamW({"p": p, "q": q}, weight_decay=0.0)
    opt.step(0.1)
    assert not np.array_equal(p.data, np.ones(2))
    np.testing.assert_array_equal(q.data, np.ones(2))


# -- training loop -------------------------------------------------------------------


def _tiny_dataset(n=6, points=16, seed=0):
    return generate_poisson_dataset(n, points, seed=seed, grid=16)


def test_one_epoch_bookkeeping(tmp_path):
    ds = _tiny_dataset()
    model = build_model(_desk_config(), seed=0)
    cfg = TrainConfig(epochs=1, batch_size=2, max_lr=1e-3, seed=0, checkpoint_interval=1)
    result = train(model, ds.train_samples, ds.test_samples, cfg, out_dir=tmp_path)
    assert len(result.history) == 1
    row = result.history[0]
    assert row["epoch"] == 1 and row["step"] == 3
    assert math.isfinite(row["train_loss"]) and math.isfinite(row["test_rel_l2"])
    assert (tmp_path / "metrics.log").exists()
    assert (tmp_path / "best.ckpt").exists()


def test_training_determinism_logs_bitwise():
    ds = _tiny_dataset()
    logs = []
    for _ in range(2):
        model = build_model(_desk_config(), seed=4)
        cfg = TrainConfig(epochs=2, batch_size=2, max_lr=1e-3, seed=7)
        result = train(model, ds.train_samples, ds.test_samples, cfg)
        logs.append(result.log_lines)
    assert logs[0] == logs[1]


def test_training_reduces_loss():
    ds = _tiny_dataset(n=8, points=24, seed=3)
    model = build_model(_desk_config(precision="float32"), seed=1)
    cfg = TrainConfig(epochs=8, batch_size=4, max_lr=2e-3, seed=1)
    result = train(model, ds.train_samples, ds.test_samples, cfg)
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = _tiny_dataset(n=6, points=16, seed=5)
    cfg_full = TrainConfig(epochs=4, batch_size=2, max_lr=1e-3, seed=3, checkpoint_interval=2)

    model_a = build_model(_desk_config(precision="float32"), seed=2)
    full = train(model_a, ds.train_samples, ds.test_samples, cfg_full)

    # interrupt the same schedule after epoch 2 (checkpoint lands on the interval)
    model_b = build_model(_desk_config(precision="float32"), seed=2)
    train(model_b, ds.train_samples, ds.test_samples, cfg_full, out_dir=tmp_path,
          on_epoch=lambda row: row["epoch"] < 2)

    model_c = build_model(_desk_config(precision="float32"), seed=2)
    resumed = train(model_c, ds.train_samples, ds.test_samples, cfg_full,
                    resume_from=tmp_path / "last.ckpt")
    assert [r["epoch"] for r in resumed.history] == [3, 4]
    for row_full, row_res in zip(full.history[2:], resumed.history):
        assert abs(row_full["train_loss"] - row_res["train_loss"]) <= 1e-6
        assert abs(row_full["test_rel_l2"] - row_res["test_rel_l2"]) <= 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic(tmp_path):
    ds = _tiny_dataset(n=4, points=16, seed=6)
    model = build_model(_desk_config(precision="float32"), seed=3)
    for _, p in model.named_parameters():
        p.data = p.data + np.float32(1e30)  # force overflow
    cfg = TrainConfig(epochs=1, batch_size=2, max_lr=1e-3, seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(model, ds.train_samples, ds.test_samples, cfg, out_dir=tmp_path)


def test_evaluate_threads_match_serial():
    ds = _tiny_dataset(n=5, points=16, seed=7)
    model = build_model(_desk_config(), seed=5)
    serial = evaluate(model, ds.samples)
    threaded = evaluate(model, ds.samples, threads=4)
    np.testing.assert_array_equal(serial["per_channel"], threaded["per_channel"])


def test_super_resolution_factor_one_equals_standard():
    ds = _tiny_dataset(n=3, points=16, seed=8)
    model = build_model(_desk_config(), seed=6)
    s = ds.samples[0]
    report = evaluate_super_resolution(model, s, 1)
    _, base = relative_l2(model.predict(s), s.targets)
    assert report["rel_l2"] == base


def test_super_resolution_uses_dense_block():
    ds = _tiny_dataset(n=3, points=16, seed=9)
    model = build_model(_desk_config(), seed=7)
    report = evaluate_super_resolution(model, ds.samples[0], 4)
    assert report["n_queries"] == 64
    assert report["finite"]
    with pytest.raises(ValueError, match="dense block"):
        evaluate_super_resolution(model, ds.samples[0], 5)


def test_ablation_harness_bookkeeping_rows():
    ds = _tiny_dataset(n=4, points=16, seed=10)
    base = _desk_config()
    rows = ablation_harness(["fusion", "no_fusion", "knn:4", "knn:8", "radius:0.25", "radius:0.9"],
                            base, None, ds.train_samples, ds.test_samples)
    by_name = {r["variant"]: r for r in rows}
    assert by_name["no_fusion"]["parameters"] > by_name["fusion"]["parameters"]
    assert by_name["knn:8"]["mean_edges"] == 2 * by_name["knn:4"]["mean_edges"]
    assert by_name["radius:0.9"]["mean_edges"] >= by_name["radius:0.25"]["mean_edges"]
    assert all(r["rel_l2"] is None for r in rows)


def test_ablation_harness_trains_when_budgeted():
    ds = _tiny_dataset(n=4, points=16, seed=11)
    rows = ablation_harness(["fusion"], _desk_config(precision="float32"),
                            TrainConfig(epochs=1, batch_size=2, max_lr=1e-3, seed=0),
                            ds.train_samples, ds.test_samples)
    assert rows[0]["rel_l2"] is not None and math.isfinite(rows[0]["rel_l2"])
