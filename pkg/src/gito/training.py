"""Training loop, relative-L2 metric/loss, OneCycle schedule, harnesses.

The training loss is the reported metric itself: mean per-channel relative
L2 over the batch.  The optimizer is decoupled-weight-decay Adam; the
schedule is a cosine OneCycle.  Batches are lists of whole samples
(variable node counts preclude padding into one tensor) and every source of
randomness derives from (seed, epoch), so runs are replayable and
checkpoint resume is exact at training precision.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from gito.autodiff import Tensor, backward
from gito.checkpoint import load_model_checkpoint, save_model_checkpoint
from gito.data import compute_norm_stats
from gito.graphs import GraphSpec, build_knn_graph, build_radius_graph
from gito.layers import slice_cols
from gito.model import GitoModel, build_model, no_fusion_variant

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "relative_l2",
    "relative_l2_loss",
    "onecycle_lr",
    "AdamW",
    "clip_gradients",
    "train",
    "evaluate",
    "evaluate_super_resolution",
    "ablation_harness",
    "format_log_line",
]

_FLOAT_FIELDS = {"max_lr", "weight_decay", "pct_start", "div_factor",
                 "final_div_factor", "grad_clip_norm"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    max_lr: float = 1e-3
    weight_decay: float = 1e-5
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0 and f.name != "seed":
                raise ValueError(f"{f.name} must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"pct_start must lie in (0, 1), got {self.pct_start}")

    def to_lines(self):
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            kwargs[key] = float(raw) if key in _FLOAT_FIELDS else int(raw)
        return cls(**kwargs)

    def config_keys(self):
        return {f.name for f in fields(self)}


# -- metric / loss ---------------------------------------------------------------


def relative_l2(pred, truth):
    """Per-channel ||pred - truth|| / ||truth|| and their mean."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    per_channel = np.empty(truth.shape[1])
    for c in range(truth.shape[1]):
        denom = np.linalg.norm(truth[:, c])
        if denom == 0.0:
            raise ValueError(f"relative L2 undefined: truth channel {c} has zero norm")
        per_channel[c] = np.linalg.norm(pred[:, c] - truth[:, c]) / denom
    return per_channel, float(per_channel.mean())


def relative_l2_loss(pred, truth):
    """Differentiable mean per-channel relative L2 (truth is constant)."""
    from gito import autodiff as ad

    truth_data = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    n_channels = truth_data.shape[1]
    truth_t = truth if isinstance(truth, Tensor) else Tensor(truth_data.astype(pred.dtype))
    total = None
    for c in range(n_channels):
        denom = float(np.linalg.norm(truth_data[:, c].astype(np.float64)))
        if denom == 0.0:
            raise ValueError(f"relative L2 undefined: truth channel {c} has zero norm")
        diff = slice_cols(pred, c, c + 1) - slice_cols(truth_t, c, c + 1)
        term = ad.sqrt((diff * diff).sum()) * (1.0 / denom)
        total = term if total is None else total + term
    return total * (1.0 / n_channels)


# -- schedule / optimizer ----------------------------------------------------------


def onecycle_lr(step, total_steps, cfg: TrainConfig):
    """Cosine OneCycle: max_lr/div_factor -> max_lr -> max_lr/final_div_factor."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr_start = cfg.max_lr / cfg.div_factor
    lr_end = cfg.max_lr / cfg.final_div_factor
    warm = cfg.pct_start * total_steps
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return lr_start + (cfg.max_lr - lr_start) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / (total_steps - warm)
    return lr_end + (cfg.max_lr - lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay; moments live at parameter precision."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-5):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            update = (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def state_tensors(self):
        out = {}
        for key in self.params:
            out[f"opt.m.{key}"] = self.m[key]
            out[f"opt.v.{key}"] = self.v[key]
        out["opt.t"] = np.array([float(self.t)])
        return out

    def load_state_tensors(self, tensors):
        for key, p in self.params.items():
            if f"opt.m.{key}" in tensors:
                self.m[key] = tensors[f"opt.m.{key}"].astype(p.dtype)
                self.v[key] = tensors[f"opt.v.{key}"].astype(p.dtype)
        if "opt.t" in tensors:
            self.t = int(tensors["opt.t"][0])


def clip_gradients(params, max_norm):
    """Scale all gradients jointly so the global norm is at most max_norm."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# -- evaluation --------------------------------------------------------------------


def _eval_one(model, sample):
    per, mean = relative_l2(model.predict(sample), sample.targets)
    return per, mean


def evaluate(model, samples, threads=None):
    """Mean relative L2 over samples (averaged per channel, then channels)."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _eval_one(model, s), samples))
    else:
        results = [_eval_one(model, s) for s in samples]
    per_channel = np.mean([r[0] for r in results], axis=0)
    return {
        "per_channel": per_channel,
        "mean": float(per_channel.mean()),
        "per_sample": [r[1] for r in results],
    }


def evaluate_super_resolution(model, sample, query_factor):
    """Relative L2 at ``query_factor`` times the native query density.

    Needs the sample's dense oracle block (synthetic data); factor 1 simply
    re-evaluates the sample's own query set.
    """
    if query_factor < 1:
        raise ValueError("query_factor must be >= 1")
    base_per, base = relative_l2(model.predict(sample), sample.targets)
    if query_factor == 1:
        return {"query_factor": 1, "n_queries": sample.n_queries,
                "rel_l2": base, "per_channel": base_per, "base_rel_l2": base}
    if sample.dense_queries is None:
        raise ValueError("sample carries no dense oracle block for super-resolution")
    n_dense = query_factor * sample.n_queries
    if n_dense > sample.dense_queries.n_points:
        raise ValueError(
            f"dense block holds {sample.dense_queries.n_points} points, "
            f"factor {query_factor} needs {n_dense}"
        )
    from gito.graphs import PointCloud

    cloud = PointCloud(sample.dense_queries.coords[:n_dense])
    preds = model.predict(sample, query_cloud=cloud)
    per, mean = relative_l2(preds, sample.dense_targets[:n_dense])
    return {"query_factor": query_factor, "n_queries": n_dense, "rel_l2": mean,
            "per_channel": per, "base_rel_l2": base, "finite": bool(np.isfinite(preds).all())}


# -- training loop -----------------------------------------------------------------


def format_log_line(epoch, step, lr, train_loss, test_rel, per_channel=None):
    line = (f"epoch={epoch} step={step} lr={lr:.17g} "
            f"train_loss={train_loss:.17g} test_rel_l2={test_rel:.17g}")
    if per_channel is not None and len(per_channel) > 1:
        line += " per_channel=" + ",".join(f"{v:.17g}" for v in per_channel)
    return line


@dataclass
class TrainResult:
    history: list
    log_lines: list
    best_rel: float
    best_epoch: int
    best_path: str | None
    last_path: str | None


def train(model: GitoModel, train_samples, test_samples, cfg: TrainConfig,
          out_dir=None, resume_from=None, threads=None, on_epoch=None):
    """Train in place; returns per-epoch history and checkpoint paths.

    Determinism contract: identical (model seed, cfg.seed, data) replays
    bitwise at a fixed precision.  ``resume_from`` restores parameters,
    optimizer moments and the epoch counter, then continues the same
    schedule; batch order is a pure function of (cfg.seed, epoch).
    """
    if not train_samples:
        raise ValueError("train needs at least one training sample")
    dtype = model.config.dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    identity_norm = np.all(model.norm.coord_std == 1.0) and np.all(model.norm.coord_mean == 0.0)
    if identity_norm and resume_from is None:
        model.norm = compute_norm_stats(
            train_samples, model.config.input_function_count, model.config.output_field_count
        )

    opt = AdamW(dict(model.named_parameters()), weight_decay=cfg.weight_decay)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    start_epoch = 0
    step = 0
    best_rel = math.inf
    best_epoch = -1
    if resume_from is not None:
        loaded, extras = load_model_checkpoint(resume_from)
        for (name, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
            p.data = q.data.astype(dtype)
        model.norm = loaded.norm
        opt.load_state_tensors(extras)
        if "train.epoch" in extras:
            start_epoch = int(extras["train.epoch"][0])
        if "train.step" in extras:
            step = int(extras["train.step"][0])
        if "train.best_rel" in extras:
            best_rel = float(extras["train.best_rel"][0])
            best_epoch = int(extras["train.best_epoch"][0])

    best_path = str(out_dir / "best.ckpt") if out_dir else None
    last_path = str(out_dir / "last.ckpt") if out_dir else None
    history, log_lines = [], []
    log_file = (out_dir / "metrics.log").open("a") if out_dir else None

    def bookkeeping():
        return {
            "train.epoch": np.array([float(epoch + 1)]),
            "train.step": np.array([float(step)]),
            "train.best_rel": np.array([best_rel if math.isfinite(best_rel) else 1e30]),
            "train.best_epoch": np.array([float(best_epoch)]),
        }

    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            loss_sum = 0.0
            lr = onecycle_lr(step, total_steps, cfg)
            for lo in range(0, n, cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                lr = onecycle_lr(step, total_steps, cfg)
                model.zero_grad()
                for idx in batch:
                    sample = train_samples[idx]
                    pred = model.forward(sample)
                    loss = relative_l2_loss(pred, Tensor(sample.targets.astype(dtype)))
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingDiverged(
                            f"non-finite training loss at epoch {epoch + 1}, step {step}"
                            + (f"; last good checkpoint: {last_path}" if last_path else "")
                        )
                    loss_sum += value
                    backward(loss * (1.0 / len(batch)))
                clip_gradients(opt.params.values(), cfg.grad_clip_norm)
                opt.step(lr)
                step += 1
            train_loss = loss_sum / n
            report = evaluate(model, test_samples, threads=threads) if test_samples else None
            test_rel = report["mean"] if report else math.nan
            per_channel = report["per_channel"] if report else None
            row = {"epoch": epoch + 1, "step": step, "lr": lr,
                   "train_loss": train_loss, "test_rel_l2": test_rel,
                   "per_channel": None if per_channel is None else np.array(per_channel)}
            history.append(row)
            line = format_log_line(epoch + 1, step, lr, train_loss, test_rel, per_channel)
            log_lines.append(line)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            if report and test_rel < best_rel:
                best_rel = test_rel
                best_epoch = epoch + 1
                if out_dir:
                    save_model_checkpoint(best_path, model,
                                          extra={**opt.state_tensors(), **bookkeeping()})
            if out_dir and ((epoch + 1) % cfg.checkpoint_interval == 0 or epoch + 1 == cfg.epochs):
                save_model_checkpoint(last_path, model,
                                      extra={**opt.state_tensors(), **bookkeeping()})
            if on_epoch is not None and on_epoch(history[-1]) is False:
                break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(history, log_lines, best_rel, best_epoch, best_path, last_path)


# -- ablation harness ---------------------------------------------------------------


def _variant_config(variant, base_cfg):
    if variant == "fusion":
        return base_cfg
    if variant == "no_fusion":
        return no_fusion_variant(base_cfg)
    spec = GraphSpec.parse(variant)  # knn:{k} / radius:{r}
    return replace(base_cfg, query_graph=str(spec), input_graph=str(spec))


def _mean_query_edges(cfg, samples):
    spec = GraphSpec.parse(cfg.query_graph)
    counts = []
    for s in samples:
        if spec.strategy == "knn":
            g = build_knn_graph(s.query_points, spec.k)
        else:
            g = build_radius_graph(s.query_points, spec.radius)
        counts.append(g.n_edges)
    return float(np.mean(counts))


def ablation_harness(variants, base_cfg, train_cfg, train_samples, test_samples,
                     seed=0, threads=None):
    """Build (and optionally train) each variant under identical budgets.

    Returns one row per variant with parameter count, mean query-graph edge
    count, and test relative L2 (None when train_cfg.epochs is unset/zero,
    which turns the harness into pure bookkeeping).
    """
    rows = []
    for variant in variants:
        cfg = _variant_config(variant, base_cfg)
        model = build_model(cfg, seed=seed)
        row = {
            "variant": variant,
            "parameters": model.param_count(),
            "mean_edges": _mean_query_edges(cfg, train_samples or test_samples),
            "rel_l2": None,
        }
        if train_cfg is not None and train_cfg.epochs > 0 and train_samples:
            result = train(model, train_samples, test_samples, train_cfg, threads=threads)
            row["rel_l2"] = result.history[-1]["test_rel_l2"]
            row["best_rel_l2"] = result.best_rel
        rows.append(row)
    return rows
