"""Command-line entry point.

Subcommands: train, eval, predict, gen-data, graph-stats, grad-check,
ablate.  Configuration comes from a flat key=value file; flags override
file values.  All randomness flows from --seed.  Failures print one
machine-parsable ``error=`` line on stderr and exit 1; argparse handles
usage errors with exit 2.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from gito.checkpoint import load_model_checkpoint, save_model_checkpoint
from gito.data import Dataset, generate_poisson_dataset, load_dataset, save_dataset
from gito.graphs import GraphSpec, build_knn_graph, build_radius_graph, graph_stats
from gito.gradcheck import run_gradient_suite
from gito.model import ModelConfig, Sample, build_model
from gito.training import (
    TrainConfig,
    ablation_harness,
    evaluate,
    evaluate_super_resolution,
    train,
)

__all__ = ["main", "parse_config_file"]


def parse_config_file(path):
    """Flat key=value lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    known = ModelConfig().config_keys() | TrainConfig().config_keys() | {"seed"}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = value
    return values


def _configs_from(args, require_file=True):
    values = {}
    if getattr(args, "config", None):
        values = parse_config_file(args.config)
    elif require_file:
        raise ValueError("--config is required")
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "max_lr": getattr(args, "max_lr", None),
        "seed": getattr(args, "seed", None),
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    if getattr(args, "strategy", None):
        spec = _spec_from_flags(args)
        values["query_graph"] = str(spec)
        values["input_graph"] = str(spec)
    model_cfg = ModelConfig.from_dict(values)
    train_cfg = TrainConfig.from_dict(values)
    seed = int(values.get("seed", 0))
    return model_cfg, train_cfg, seed


def _spec_from_flags(args):
    if args.strategy == "knn":
        if args.k is None:
            raise ValueError("--strategy knn needs --k")
        return GraphSpec("knn", k=args.k)
    if args.radius is None:
        raise ValueError("--strategy radius needs --radius")
    return GraphSpec("radius", radius=args.radius)


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _split_samples(dataset, split):
    if split == "train":
        return dataset.train_samples
    if split == "test":
        return dataset.test_samples
    return dataset.samples


# -- subcommand handlers ----------------------------------------------------------


def _cmd_train(args):
    model_cfg, train_cfg, seed = _configs_from(args)
    dataset = load_dataset(args.data)
    model = build_model(model_cfg, seed=seed)
    result = train(
        model, dataset.train_samples, dataset.test_samples, train_cfg,
        out_dir=args.out, resume_from=args.resume, threads=_threads(args),
    )
    for line in result.log_lines:
        print(line)
    print(f"best_rel_l2={result.best_rel:.17g} best_epoch={result.best_epoch}")
    if result.best_path:
        print(f"checkpoint={result.best_path}")
    return 0


def _cmd_eval(args):
    model, _ = load_model_checkpoint(args.model)
    dataset = load_dataset(args.data)
    samples = _split_samples(dataset, args.split)
    if args.query_factor and args.query_factor > 1:
        reports = [evaluate_super_resolution(model, s, args.query_factor) for s in samples]
        mean = float(np.mean([r["rel_l2"] for r in reports]))
        base = float(np.mean([r["base_rel_l2"] for r in reports]))
        print(f"query_factor={args.query_factor}")
        print(f"rel_l2.base={base:.17g}")
        print(f"rel_l2.mean={mean:.17g}")
        return 0
    report = evaluate(model, samples, threads=_threads(args))
    for c, value in enumerate(report["per_channel"]):
        print(f"rel_l2.channel{c}={value:.17g}")
    print(f"rel_l2.mean={report['mean']:.17g}")
    return 0


def _cmd_predict(args):
    model, _ = load_model_checkpoint(args.model)
    dataset = load_dataset(args.data)
    samples = _split_samples(dataset, args.split)
    predicted = [
        Sample(s.input_functions, s.query_points, model.predict(s)) for s in samples
    ]
    out = Dataset(predicted, np.arange(len(predicted)), np.array([], dtype=int),
                  meta=dict(dataset.meta))
    manifest = save_dataset(args.out, out, prefix="prediction")
    print(f"predictions={manifest.parent}")
    print(f"n_samples={len(predicted)}")
    return 0


def _cmd_gen_data(args):
    dataset = generate_poisson_dataset(
        args.samples, args.points, seed=args.seed, grid=args.grid,
        test_fraction=args.test_fraction, super_factor=args.super_factor,
    )
    manifest = save_dataset(args.out, dataset)
    print(f"dataset={manifest.parent}")
    print(f"n_train={len(dataset.train_idx)} n_test={len(dataset.test_idx)}")
    return 0


def _cmd_graph_stats(args):
    dataset = load_dataset(args.data)
    spec = _spec_from_flags(args)
    per_sample = []
    for s in dataset.samples:
        cloud = s.query_points
        if spec.strategy == "knn":
            g = build_knn_graph(cloud, spec.k)
        else:
            g = build_radius_graph(cloud, spec.radius)
        per_sample.append(graph_stats(g))
    first = per_sample[0]
    print(f"query-point graphs for {len(per_sample)} samples, strategy {spec}")
    print(f"strategy={spec.strategy}")
    if spec.strategy == "knn":
        print(f"k={spec.k}")
    else:
        print(f"radius={spec.radius:g}")
    print(f"samples={len(per_sample)}")
    print(f"nodes={first['n_nodes']}")
    print(f"edges={first['n_edges']}")
    print(f"isolated={first['n_isolated']}")
    for degree in sorted(first["degree_histogram"]):
        print(f"degree.{degree}={first['degree_histogram'][degree]}")
    print(f"mean_edges={np.mean([s['n_edges'] for s in per_sample]):.17g}")
    print(f"mean_isolated={np.mean([s['n_isolated'] for s in per_sample]):.17g}")
    return 0


def _cmd_grad_check(args):
    rows = run_gradient_suite(seed=args.seed, rtol=args.rtol)
    failed = 0
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        failed += 0 if r["passed"] else 1
        print(f"{status} layer={r['layer']} seed={r['seed']} rel_error={r['rel_error']:.3e}")
    print(f"checks={len(rows)} failures={failed} rtol={args.rtol:g}")
    return 0 if failed == 0 else 1


def _cmd_ablate(args):
    model_cfg, train_cfg, seed = _configs_from(args)
    dataset = load_dataset(args.data)
    budget = train_cfg if args.epochs else None
    rows = ablation_harness(
        args.variant, model_cfg, budget, dataset.train_samples, dataset.test_samples,
        seed=seed, threads=_threads(args),
    )
    header = f"{'variant':<14} {'parameters':>12} {'mean_edges':>12} {'rel_l2':>10}"
    print(header)
    for row in rows:
        rel = "-" if row["rel_l2"] is None else f"{row['rel_l2']:.4g}"
        print(f"{row['variant']:<14} {row['parameters']:>12} {row['mean_edges']:>12.1f} {rel:>10}")
    for row in rows:
        tag = row["variant"].replace(":", "_")
        print(f"params.{tag}={row['parameters']}")
        print(f"edges.{tag}={row['mean_edges']:.17g}")
        if row["rel_l2"] is not None:
            print(f"rel_l2.{tag}={row['rel_l2']:.17g}")
    return 0


# -- parser --------------------------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gito",
        description="Graph-informed transformer operator: train and evaluate "
                    "mesh-agnostic PDE surrogates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None if config else 0)
        p.add_argument("--threads", type=int, default=None)
        if config:
            p.add_argument("--config", type=str)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-lr", dest="max_lr", type=float, default=None)

    p = sub.add_parser("eval", help="relative-L2 evaluation of a checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--query-factor", dest="query_factor", type=int, default=1)

    p = sub.add_parser("predict", help="write GITS prediction files")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")

    p = sub.add_parser("gen-data", help="generate the synthetic Poisson dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=240)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--grid", type=int, default=128)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=1.0 / 6.0)
    p.add_argument("--super-factor", dest="super_factor", type=int, default=4)

    p = sub.add_parser("graph-stats", help="summarize graph construction on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=["knn", "radius"], required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--radius", type=float, default=None)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--rtol", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="fusion / graph-construction ablations")
    common(p, config=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", action="append", required=True,
                   help="fusion | no_fusion | knn:{k} | radius:{r} (repeatable)")
    p.add_argument("--epochs", type=int, default=None,
                   help="training budget per variant; omit for bookkeeping only")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-lr", dest="max_lr", type=float, default=None)
    return parser


_HANDLERS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gen-data": _cmd_gen_data,
    "graph-stats": _cmd_graph_stats,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:  # runtime failure -> single parsable line, exit 1
        print(f"error={type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
