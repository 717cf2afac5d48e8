"""Datasets: synthetic Poisson generation, GITS file I/O, normalization.

The synthetic generator manufactures desk-scale operator-learning problems:
``-laplace(u) = f`` on the unit square with homogeneous Dirichlet walls,
``f`` a small sum of random Gaussian bumps.  Ground truth comes from a
five-point-stencil direct solve on a fine uniform grid (the oracle, which
shares no code with the model) and is sampled at scattered points.

Samples travel as "GITS" binary files plus a plain-text manifest carrying
schema and the train/test split.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import identity, kron
from scipy.sparse import diags as sparse_diags
from scipy.sparse.linalg import splu

from gito.graphs import PointCloud
from gito.model import NormStats, Sample

__all__ = [
    "Dataset",
    "DataFormatError",
    "PoissonSolver",
    "generate_poisson_dataset",
    "compute_norm_stats",
    "normalize",
    "denormalize",
    "save_sample",
    "load_sample",
    "save_dataset",
    "load_dataset",
]

SAMPLE_MAGIC = b"GITS"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Sample collection with a seeded split and optional train-split stats."""

    samples: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    stats: NormStats | None = None
    meta: dict = None

    def __post_init__(self):
        if self.meta is None:
            self.meta = {}

    @property
    def train_samples(self):
        return [self.samples[i] for i in self.train_idx]

    @property
    def test_samples(self):
        return [self.samples[i] for i in self.test_idx]


# -- Poisson oracle -------------------------------------------------------------


class PoissonSolver:
    """Direct five-point-stencil solve of -laplace(u) = f on [0,1]^2, u=0 on
    the boundary.  The sparse factorization is reused across right-hand sides.
    """

    def __init__(self, grid=128):
        if grid < 4:
            raise ValueError(f"grid must be at least 4 intervals, got {grid}")
        self.grid = grid
        self.h = 1.0 / grid
        m = grid - 1
        main = sparse_diags([2.0 * np.ones(m), -np.ones(m - 1), -np.ones(m - 1)], [0, 1, -1])
        eye = identity(m, format="csc")
        self._lu = splu((kron(eye, main) + kron(main, eye)).tocsc())
        ticks = np.linspace(0.0, 1.0, grid + 1)
        self._xi, self._yi = np.meshgrid(ticks[1:-1], ticks[1:-1], indexing="ij")

    def solve_grid(self, f):
        """Full (grid+1)^2 solution field for callable forcing ``f(x, y)``."""
        rhs = (self.h ** 2) * np.asarray(f(self._xi, self._yi), dtype=np.float64)
        interior = self._lu.solve(rhs.reshape(-1)).reshape(self.grid - 1, self.grid - 1)
        full = np.zeros((self.grid + 1, self.grid + 1))
        full[1:-1, 1:-1] = interior
        return full

    def interpolate(self, field, points):
        """Bilinear sample of a grid field at (n, 2) points in [0, 1]^2."""
        pts = np.asarray(points, dtype=np.float64)
        scaled = np.clip(pts / self.h, 0.0, self.grid - 1e-12)
        i0 = np.floor(scaled[:, 0]).astype(int)
        j0 = np.floor(scaled[:, 1]).astype(int)
        fx = scaled[:, 0] - i0
        fy = scaled[:, 1] - j0
        return (
            field[i0, j0] * (1 - fx) * (1 - fy)
            + field[i0 + 1, j0] * fx * (1 - fy)
            + field[i0, j0 + 1] * (1 - fx) * fy
            + field[i0 + 1, j0 + 1] * fx * fy
        )

    def solve_at(self, f, points):
        return self.interpolate(self.solve_grid(f), points)


def _random_forcing(rng):
    """1 to 3 Gaussian bumps with a common sign; returns a vectorized callable.

    One sign per sample keeps the solution norm bounded away from zero, so
    per-sample relative errors stay well conditioned.
    """
    n_bumps = int(rng.integers(1, 4))
    amps = rng.uniform(0.5, 1.5, n_bumps) * rng.choice([-1.0, 1.0])
    centers = rng.uniform(0.2, 0.8, (n_bumps, 2))
    widths = rng.uniform(0.05, 0.15, n_bumps)

    def f(x, y):
        total = np.zeros_like(np.asarray(x, dtype=np.float64))
        for a, (cx, cy), w in zip(amps, centers, widths):
            total += a * np.exp(-(((x - cx) ** 2) + ((y - cy) ** 2)) / (2.0 * w * w))
        return total

    return f


def generate_poisson_dataset(n_samples, n_points, seed, grid=128, test_fraction=1.0 / 6.0,
                             super_factor=4):
    """Synthetic dataset of ``n_samples`` forced-Poisson problems.

    Each sample observes ``f`` at ``n_points`` scattered locations (the
    input function) and asks for ``u`` at ``n_points`` other locations;
    an extra block of ``super_factor * n_points`` query/target pairs is
    attached for super-resolution evaluation.  Split and content are
    deterministic in ``seed``; sample ``i`` depends only on ``(seed, i)``.
    """
    if n_points < 16:
        raise ValueError(f"n_points must be at least 16, got {n_points}")
    solver = PoissonSolver(grid)
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        f = _random_forcing(rng)
        field = solver.solve_grid(f)
        in_pts = rng.uniform(0.0, 1.0, (n_points, 2))
        q_pts = rng.uniform(0.0, 1.0, (n_points, 2))
        dense_pts = rng.uniform(0.0, 1.0, (super_factor * n_points, 2))
        samples.append(
            Sample(
                input_functions=[PointCloud(in_pts, f(in_pts[:, 0], in_pts[:, 1]))],
                query_points=PointCloud(q_pts),
                targets=solver.interpolate(field, q_pts)[:, None],
                dense_queries=PointCloud(dense_pts),
                dense_targets=solver.interpolate(field, dense_pts)[:, None],
            )
        )
    n_test = int(round(n_samples * test_fraction))
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n_samples)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    meta = {"d": 2, "c_out": 1, "n_functions": 1, "channels": (1,),
            "target_names": ("u",), "grid": grid}
    return Dataset(samples, train_idx, test_idx, meta=meta)


# -- normalization ---------------------------------------------------------------


def _safe_std(std, what):
    std = np.asarray(std, dtype=np.float64)
    zero = std == 0.0
    if zero.any():
        warnings.warn(f"{what}: zero-variance channel(s) clamped to std=1")
        std = np.where(zero, 1.0, std)
    return std


def compute_norm_stats(samples, n_functions, n_out):
    """z-score statistics from a list of samples (use the train split only)."""
    coords = np.vstack(
        [s.query_points.coords for s in samples]
        + [fn.coords for s in samples for fn in s.input_functions]
    )
    coord_mean = coords.mean(axis=0)
    coord_std = _safe_std(coords.std(axis=0), "coords")
    fn_means, fn_stds = [], []
    for i in range(n_functions):
        vals = [s.input_functions[i].values for s in samples
                if s.input_functions[i].values is not None]
        if vals:
            stacked = np.vstack(vals)
            fn_means.append(stacked.mean(axis=0))
            fn_stds.append(_safe_std(stacked.std(axis=0), f"input function {i}"))
        else:
            fn_means.append(np.zeros(0))
            fn_stds.append(np.ones(0))
    targets = np.vstack([s.targets for s in samples])
    target_mean = targets.mean(axis=0)
    target_std = _safe_std(targets.std(axis=0), "targets")
    return NormStats(coord_mean, coord_std, fn_means, fn_stds, target_mean, target_std)


def _transform_sample(sample, stats):
    fns = []
    for i, fn in enumerate(sample.input_functions):
        vals = None if fn.values is None else stats.norm_values(fn.values, i)
        fns.append(PointCloud(stats.norm_coords(fn.coords), vals))
    dq = None if sample.dense_queries is None else PointCloud(
        stats.norm_coords(sample.dense_queries.coords))
    dt = None if sample.dense_targets is None else (
        (sample.dense_targets - stats.target_mean) / stats.target_std)
    return Sample(
        input_functions=fns,
        query_points=PointCloud(stats.norm_coords(sample.query_points.coords)),
        targets=(sample.targets - stats.target_mean) / stats.target_std,
        dense_queries=dq,
        dense_targets=dt,
    )


def normalize(dataset: Dataset) -> Dataset:
    """z-score every channel using statistics from the training split."""
    stats = compute_norm_stats(
        dataset.train_samples,
        dataset.meta.get("n_functions", len(dataset.samples[0].input_functions)),
        dataset.meta.get("c_out", dataset.samples[0].targets.shape[1]),
    )
    samples = [_transform_sample(s, stats) for s in dataset.samples]
    return Dataset(samples, dataset.train_idx.copy(), dataset.test_idx.copy(),
                   stats=stats, meta=dict(dataset.meta))


def denormalize(predictions, stats: NormStats):
    """Inverse of target normalization: predictions * std + mean."""
    return np.asarray(predictions) * stats.target_std + stats.target_mean


# -- GITS binary format -----------------------------------------------------------


def save_sample(path, sample: Sample):
    d = sample.query_points.dim
    c_out = sample.targets.shape[1]
    has_dense = sample.dense_queries is not None and sample.dense_targets is not None
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<IIIII", 1, 1 if has_dense else 0, d, c_out,
                            len(sample.input_functions)))
        for fn in sample.input_functions:
            f.write(struct.pack("<II", fn.n_points, fn.n_channels))
            f.write(np.ascontiguousarray(fn.coords, dtype="<f4").tobytes())
            if fn.values is not None:
                f.write(np.ascontiguousarray(fn.values, dtype="<f4").tobytes())
        f.write(struct.pack("<I", sample.query_points.n_points))
        f.write(np.ascontiguousarray(sample.query_points.coords, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(sample.targets, dtype="<f4").tobytes())
        if has_dense:
            f.write(struct.pack("<I", sample.dense_queries.n_points))
            f.write(np.ascontiguousarray(sample.dense_queries.coords, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(sample.dense_targets, dtype="<f4").tobytes())


def load_sample(path) -> Sample:
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise DataFormatError(f"{path}: truncated reading {what} at byte offset {off}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    def floats(n, what):
        return np.frombuffer(take(4 * n, what), dtype="<f4").astype(np.float64)

    if take(4, "magic") != SAMPLE_MAGIC:
        raise DataFormatError(f"{path}: not a GITS sample (bad magic at byte offset 0)")
    version, flags, d, c_out, n_fns = struct.unpack("<IIIII", take(20, "header"))
    if version != 1:
        raise DataFormatError(f"{path}: unsupported GITS version {version} at byte offset 4")
    fns = []
    for i in range(n_fns):
        n_pts, c = struct.unpack("<II", take(8, f"function {i} counts"))
        coords = floats(n_pts * d, f"function {i} coords").reshape(n_pts, d)
        values = floats(n_pts * c, f"function {i} values").reshape(n_pts, c) if c else None
        fns.append(PointCloud(coords, values))
    (n_q,) = struct.unpack("<I", take(4, "query count"))
    q_coords = floats(n_q * d, "query coords").reshape(n_q, d)
    targets = floats(n_q * c_out, "targets").reshape(n_q, c_out)
    dense_q = dense_t = None
    if flags & 1:
        (n_dense,) = struct.unpack("<I", take(4, "dense count"))
        dense_q = PointCloud(floats(n_dense * d, "dense coords").reshape(n_dense, d))
        dense_t = floats(n_dense * c_out, "dense targets").reshape(n_dense, c_out)
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes at byte offset {off}")
    return Sample(fns, PointCloud(q_coords), targets,
                  dense_queries=dense_q, dense_targets=dense_t)


def save_dataset(directory, dataset: Dataset, prefix="sample"):
    """Write samples as GITS files plus a manifest with schema and split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split = {int(i): "test" for i in dataset.test_idx}
    lines = ["# gito dataset manifest", "version=1"]
    meta = dataset.meta
    first = dataset.samples[0]
    lines.append(f"d={meta.get('d', first.query_points.dim)}")
    lines.append(f"c_out={meta.get('c_out', first.targets.shape[1])}")
    lines.append(f"n_functions={meta.get('n_functions', len(first.input_functions))}")
    channels = meta.get("channels", tuple(fn.n_channels for fn in first.input_functions))
    lines.append("channels=" + ",".join(str(c) for c in channels))
    names = meta.get("target_names")
    if names:
        lines.append("target_names=" + ",".join(names))
    width = max(4, len(str(len(dataset.samples) - 1)))
    for i, sample in enumerate(dataset.samples):
        fname = f"{prefix}_{i:0{width}d}.gits"
        save_sample(directory / fname, sample)
        lines.append(f"sample={fname}:{split.get(i, 'train')}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory / "manifest.txt"


def load_dataset(directory, schema=None) -> Dataset:
    """Read a manifest directory back into a Dataset.

    ``schema``, when given, is a dict with any of ``d``, ``c_out``,
    ``n_functions``, ``channels``; mismatches raise DataFormatError.
    """
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise DataFormatError(f"no manifest.txt in {directory}")
    meta = {}
    entries = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key == "sample":
            fname, _, split = value.partition(":")
            entries.append((fname, split or "train"))
        else:
            meta[key] = value
    parsed = {
        "d": int(meta.get("d", 2)),
        "c_out": int(meta.get("c_out", 1)),
        "n_functions": int(meta.get("n_functions", 1)),
        "channels": tuple(int(c) for c in meta.get("channels", "1").split(",") if c != ""),
    }
    if "target_names" in meta:
        parsed["target_names"] = tuple(meta["target_names"].split(","))
    if schema:
        for key, expected in schema.items():
            if key in parsed and parsed[key] != expected:
                raise DataFormatError(
                    f"{manifest}: schema mismatch for {key}: manifest has "
                    f"{parsed[key]!r}, expected {expected!r}"
                )
    samples, train_idx, test_idx = [], [], []
    for i, (fname, split) in enumerate(entries):
        sample = load_sample(directory / fname)
        if len(sample.input_functions) != parsed["n_functions"]:
            raise DataFormatError(
                f"{fname}: {len(sample.input_functions)} input functions, "
                f"manifest declares {parsed['n_functions']}"
            )
        actual_channels = tuple(fn.n_channels for fn in sample.input_functions)
        if actual_channels != parsed["channels"]:
            raise DataFormatError(
                f"{fname}: input channels {actual_channels}, manifest declares "
                f"{parsed['channels']}"
            )
        if sample.targets.shape[1] != parsed["c_out"]:
            raise DataFormatError(
                f"{fname}: {sample.targets.shape[1]} target channels, manifest "
                f"declares {parsed['c_out']}"
            )
        samples.append(sample)
        (test_idx if split == "test" else train_idx).append(i)
    return Dataset(samples, np.array(train_idx, dtype=int), np.array(test_idx, dtype=int),
                   meta=parsed)
