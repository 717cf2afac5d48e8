"""Scikit-learn style estimator facade.

``GitoOperator`` wraps model construction and training behind the familiar
``fit`` / ``predict`` / ``score`` / ``get_params`` surface so the operator
composes with the wider ecosystem (cloning, grid search over its
hyperparameters, pipelines that pass estimators around).  X is a list of
:class:`gito.model.Sample` objects rather than a rectangular array; the
usual array checks are replaced by sample validation helpers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from gito.model import ModelConfig, Sample, build_model
from gito.training import TrainConfig, evaluate, relative_l2, train

__all__ = ["GitoOperator", "check_samples"]


def check_samples(X, require_targets=True):
    """Validate a list of samples; returns it unchanged."""
    if isinstance(X, Sample):
        X = [X]
    if not isinstance(X, (list, tuple)) or len(X) == 0:
        raise ValueError("X must be a non-empty list of gito Sample objects")
    for i, s in enumerate(X):
        if not isinstance(s, Sample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected Sample")
        if require_targets and s.targets.shape[0] != s.query_points.n_points:
            raise ValueError(f"X[{i}] targets misaligned with query points")
    return list(X)


class GitoOperator(BaseEstimator):
    """Graph-informed transformer operator with an sklearn-style API.

    Parameters mirror the model/training configuration schema; ``fit``
    consumes a list of samples whose targets are the supervision, so ``y``
    is accepted only for interface compatibility and must be None.
    """

    def __init__(self, hidden_size=32, n_heads=4, n_experts=2, n_attention_layers=2,
                 n_hgt_blocks=None, mlp_layers=2, mlp_hidden=None, query_graph="knn:4",
                 input_graph="knn:4", apply_hgt_to_inputs=False, input_function_count=1,
                 input_channels=(1,), output_field_count=1, precision="float32",
                 fusion_ffn_mult=7, use_fusion=True, tno_self_attention=True,
                 epochs=20, batch_size=4, max_lr=1e-3, weight_decay=1e-5,
                 grad_clip_norm=1.0, seed=0, threads=None):
        self.hidden_size = hidden_size
        self.n_heads = n_heads
        self.n_experts = n_experts
        self.n_attention_layers = n_attention_layers
        self.n_hgt_blocks = n_hgt_blocks
        self.mlp_layers = mlp_layers
        self.mlp_hidden = mlp_hidden
        self.query_graph = query_graph
        self.input_graph = input_graph
        self.apply_hgt_to_inputs = apply_hgt_to_inputs
        self.input_function_count = input_function_count
        self.input_channels = input_channels
        self.output_field_count = output_field_count
        self.precision = precision
        self.fusion_ffn_mult = fusion_ffn_mult
        self.use_fusion = use_fusion
        self.tno_self_attention = tno_self_attention
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.seed = seed
        self.threads = threads

    # -- config assembly -------------------------------------------------------

    def _model_config(self):
        return ModelConfig(
            hidden_size=self.hidden_size, n_heads=self.n_heads, n_experts=self.n_experts,
            n_attention_layers=self.n_attention_layers, n_hgt_blocks=self.n_hgt_blocks,
            mlp_layers=self.mlp_layers, mlp_hidden=self.mlp_hidden,
            query_graph=self.query_graph, input_graph=self.input_graph,
            apply_hgt_to_inputs=self.apply_hgt_to_inputs,
            input_function_count=self.input_function_count,
            input_channels=self.input_channels, output_field_count=self.output_field_count,
            precision=self.precision, fusion_ffn_mult=self.fusion_ffn_mult,
            use_fusion=self.use_fusion, tno_self_attention=self.tno_self_attention,
        )

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, max_lr=self.max_lr,
            weight_decay=self.weight_decay, grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
        )

    # -- estimator API -----------------------------------------------------------

    def fit(self, X, y=None, validation=None):
        """Train on a list of samples; targets live inside the samples."""
        if y is not None:
            raise ValueError("targets live inside the samples; pass y=None")
        samples = check_samples(X)
        self.model_ = build_model(self._model_config(), seed=self.seed)
        result = train(self.model_, samples, validation or [], self._train_config(),
                       threads=self.threads)
        self.history_ = result.history
        self.n_parameters_ = self.model_.param_count()
        return self

    def predict(self, X):
        """Predicted fields per sample: list of (n_q, c_out) arrays.

        A single Sample yields a single array.
        """
        self._check_fitted()
        single = isinstance(X, Sample)
        samples = check_samples(X, require_targets=False)
        preds = [self.model_.predict(s) for s in samples]
        return preds[0] if single else preds

    def score(self, X, y=None):
        """Negative mean relative L2 (higher is better, sklearn convention)."""
        self._check_fitted()
        samples = check_samples(X)
        report = evaluate(self.model_, samples, threads=self.threads)
        return -report["mean"]

    def rel_l2(self, X):
        self._check_fitted()
        return evaluate(self.model_, check_samples(X), threads=self.threads)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this GitoOperator instance is not fitted yet")
