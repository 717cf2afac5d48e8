"""Checkpoint container and model checkpoint round-trips."""

import numpy as np
import pytest

from gito.checkpoint import (
    CheckpointError,
    load_model_checkpoint,
    load_tensors,
    save_model_checkpoint,
    save_tensors,
)
from gito.model import ModelConfig, NormStats, build_model


def test_tensor_container_roundtrip(tmp_path):
    path = tmp_path / "t.ckpt"
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.weight": np.float32([[1.5]]),
        "scalar": np.array([3.0], dtype=np.float32),
    }
    save_tensors(path, tensors)
    loaded, config = load_tensors(path)
    assert config is None
    assert set(loaded) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_container_header_bytes(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"x": np.zeros(2, dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"GITO"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1  # tensor count


def test_bad_magic_and_truncation_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(path)
    good = tmp_path / "good.ckpt"
    save_tensors(good, {"x": np.ones(4, dtype=np.float32)})
    path.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(path)


def _config():
    return ModelConfig(
        hidden_size=8, n_heads=2, n_experts=2, n_attention_layers=1, n_hgt_blocks=1,
        mlp_layers=1, precision="float32", query_graph="knn:2", input_channels=(1,),
        fusion_ffn_mult=2,
    )


def test_model_checkpoint_roundtrip(tmp_path):
    model = build_model(_config(), seed=11)
    model.norm = NormStats(
        coord_mean=np.array([0.4, 0.6]), coord_std=np.array([0.2, 0.3]),
        fn_means=[np.array([1.0])], fn_stds=[np.array([2.0])],
        target_mean=np.array([0.1]), target_std=np.array([0.5]),
    )
    path = tmp_path / "model.ckpt"
    save_model_checkpoint(path, model)
    loaded, extras = load_model_checkpoint(path)
    assert extras == {}
    assert loaded.config == model.config
    assert loaded.seed == 11
    for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)  # float32: exact
    np.testing.assert_allclose(loaded.norm.coord_std, [0.2, 0.3], atol=1e-7)


def test_model_checkpoint_carries_extras(tmp_path):
    model = build_model(_config(), seed=1)
    path = tmp_path / "m.ckpt"
    save_model_checkpoint(path, model, extra={"train.step": np.array([42.0])})
    _, extras = load_model_checkpoint(path)
    assert float(extras["train.step"][0]) == 42.0


def test_model_checkpoint_predictions_survive_roundtrip(tmp_path):
    from gito.graphs import PointCloud
    from gito.model import Sample

    rng = np.random.default_rng(0)
    model = build_model(_config(), seed=2)
    sample = Sample(
        [PointCloud(rng.random((6, 2)), rng.standard_normal(6))],
        PointCloud(rng.random((4, 2))),
        np.zeros((4, 1)),
    )
    before = model.predict(sample)
    path = tmp_path / "m.ckpt"
    save_model_checkpoint(path, model)
    loaded, _ = load_model_checkpoint(path)
    np.testing.assert_array_equal(loaded.predict(sample), before)


def test_version1_checkpoint_refused_as_model(tmp_path):
    path = tmp_path / "v1.ckpt"
    save_tensors(path, {"x": np.ones(2, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="config header"):
        load_model_checkpoint(path)


def test_missing_parameter_detected(tmp_path):
    model = build_model(_config(), seed=3)
    path = tmp_path / "m.ckpt"
    tensors = {name: p.data for name, p in model.named_parameters()}
    first = next(iter(tensors))
    del tensors[first]
    from gito.checkpoint import _norm_tensors

    tensors.update(_norm_tensors(model.norm))
    save_tensors(path, tensors, config_lines=model.config.to_lines() + ["seed=3"])
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_model_checkpoint(path)
