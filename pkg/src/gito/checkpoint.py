"""Binary parameter checkpoints.

Container layout (little-endian throughout):

* magic ``GITO``, u32 format version
* version 2 only: u32 byte length + UTF-8 ``key=value`` config lines
* u32 tensor count, then per tensor: u32 name length, UTF-8 name,
  u32 rank, u64 dims, float32 payload

Version 1 is the bare tensor container; version 2 prepends the model
config header and is what model/training checkpoints use.  Normalization
statistics, optimizer moments and loop counters ride along as named
tensors (``norm.*``, ``opt.*``, ``train.*``).
"""

from __future__ import annotations

import struct

import numpy as np

from gito.model import GitoModel, ModelConfig, NormStats, build_model

__all__ = [
    "CheckpointError",
    "save_tensors",
    "load_tensors",
    "save_model_checkpoint",
    "load_model_checkpoint",
]

MAGIC = b"GITO"


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors, config_lines=None):
    """Write named float arrays; payloads are stored as float32."""
    version = 2 if config_lines is not None else 1
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", version))
        if version == 2:
            blob = "\n".join(config_lines).encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path):
    """Read a checkpoint; returns (tensors, config_lines_or_None)."""
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a GITO checkpoint (bad magic at byte 0)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version not in (1, 2):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_lines = None
    if version == 2:
        (blob_len,) = struct.unpack("<I", take(4, "config length"))
        config_lines = take(blob_len, "config").decode("utf-8").splitlines()
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        n_items = int(np.prod(dims)) if rank else 1
        payload = take(4 * n_items, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors, config_lines


def _norm_tensors(norm):
    out = {"norm.coord_mean": norm.coord_mean, "norm.coord_std": norm.coord_std,
           "norm.target_mean": norm.target_mean, "norm.target_std": norm.target_std}
    for i, (m, s) in enumerate(zip(norm.fn_means, norm.fn_stds)):
        out[f"norm.fn{i}_mean"] = m
        out[f"norm.fn{i}_std"] = s
    return out


def _norm_from_tensors(tensors, config):
    try:
        return NormStats(
            coord_mean=tensors["norm.coord_mean"].astype(np.float64),
            coord_std=tensors["norm.coord_std"].astype(np.float64),
            fn_means=[tensors[f"norm.fn{i}_mean"].astype(np.float64)
                      for i in range(config.input_function_count)],
            fn_stds=[tensors[f"norm.fn{i}_std"].astype(np.float64)
                     for i in range(config.input_function_count)],
            target_mean=tensors["norm.target_mean"].astype(np.float64),
            target_std=tensors["norm.target_std"].astype(np.float64),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing normalization tensor {exc}") from exc


def save_model_checkpoint(path, model: GitoModel, extra=None):
    """Model checkpoint: config header + parameters + normalization stats."""
    tensors = {name: p.data for name, p in model.named_parameters()}
    tensors.update(_norm_tensors(model.norm))
    if extra:
        tensors.update(extra)
    lines = model.config.to_lines() + [f"seed={model.seed}"]
    save_tensors(path, tensors, config_lines=lines)


def load_model_checkpoint(path):
    """Rebuild the model a checkpoint describes; returns (model, extras).

    ``extras`` holds every non-parameter, non-norm tensor (optimizer
    moments, loop counters) keyed by name.
    """
    tensors, config_lines = load_tensors(path)
    if config_lines is None:
        raise CheckpointError("version-1 checkpoint has no config header; "
                              "load_tensors() reads raw tensors")
    values = dict(line.split("=", 1) for line in config_lines if "=" in line)
    config = ModelConfig.from_dict(values)
    seed = int(values.get("seed", 0))
    model = build_model(config, seed=seed)
    consumed = set()
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = arr.astype(config.dtype)
        consumed.add(name)
    model.norm = _norm_from_tensors(tensors, config)
    extras = {k: v for k, v in tensors.items()
              if k not in consumed and not k.startswith("norm.")}
    return model, extras
