"""Gradient verification suite: every layer against central differences.

Builds small double-precision instances of each trainable layer (encoders,
GATv2, global attention, fusion, cross-attention, MoE, decoder) plus the
end-to-end model, and compares taped gradients with the finite-difference
oracle.  Large tensors are checked on a seeded subset of coordinates; the
comparison is the norm-wise relative error over the checked entries.
"""

from __future__ import annotations

import numpy as np

from gito.autodiff import Tensor, active_tape, backward, no_grad, tensor
from gito.graphs import PointCloud, build_knn_graph
from gito.hgt import GatV2Layer, HgtBlock
from gito.layers import MLP, AttentionBlock, MoEFFN, MultiheadLinearAttention
from gito.model import ModelConfig, Sample, build_model
from gito.training import relative_l2_loss

__all__ = ["check_gradients", "run_gradient_suite"]


def check_gradients(f, params, rtol=1e-4, eps=1e-6, max_coords=24, seed=0):
    """Worst norm-wise relative error between taped and FD gradients."""
    for p in params.values():
        p.zero_grad()
    active_tape().reset()
    backward(f())
    rng = np.random.default_rng(seed)
    worst = (0.0, None)
    for name, p in params.items():
        ad_grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        fd = np.zeros(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + eps
                hi = f().item()
                flat[c] = orig - eps
                lo = f().item()
                flat[c] = orig
                fd[j] = (hi - lo) / (2.0 * eps)
        ad_sub = ad_grad.reshape(-1)[coords]
        # the 1e-8 floor sits ~100x above central-difference cancellation
        # noise, so near-zero gradient blocks compare as equal
        scale = max(np.linalg.norm(fd), np.linalg.norm(ad_sub))
        err = 0.0 if scale < 1e-8 else np.linalg.norm(fd - ad_sub) / scale
        if err > worst[0]:
            worst = (err, name)
    active_tape().reset()
    return worst


def _toy_sample(rng, channels=1):
    return Sample(
        input_functions=[PointCloud(rng.random((6, 2)), rng.standard_normal((6, channels)))],
        query_points=PointCloud(rng.random((4, 2))),
        targets=rng.standard_normal((4, 1)) + 2.0,
    )


def _weighted(out, w):
    return (out * Tensor(w)).sum()


def run_gradient_suite(seed=0, rtol=1e-4, n_seeds=3, max_coords=16):
    """One result row per (layer, seed): name, relative error, pass flag."""
    results = []

    def record(name, case_seed, builder):
        f, params = builder(np.random.default_rng(case_seed))
        err, worst_param = check_gradients(f, params, rtol=rtol, max_coords=max_coords,
                                           seed=case_seed)
        results.append({
            "layer": name, "seed": case_seed, "rel_error": err,
            "worst_parameter": worst_param, "passed": bool(err < rtol),
        })

    def encoder_case(rng):
        mlp = MLP(3, 8, 8, 2, rng)
        x = tensor(rng.standard_normal((5, 3)), requires_grad=True)
        w = rng.standard_normal((5, 8))
        params = dict(mlp.named_parameters())
        params["input"] = x
        return (lambda: _weighted(mlp(x), w)), params

    def gat_case(rng):
        gat = GatV2Layer(8, 2, 8, 1, rng)
        g = build_knn_graph(PointCloud(rng.random((6, 2))), 2)
        v = tensor(rng.standard_normal((6, 8)), requires_grad=True)
        e = tensor(rng.standard_normal((g.n_edges, 8)), requires_grad=True)
        w = rng.standard_normal((6, 8))
        params = dict(gat.named_parameters())
        params.update({"nodes": v, "edges": e})

        def f():
            out, edges = gat(v, e, g.senders, g.receivers, 6)
            return _weighted(out, w) + 0.1 * (edges * edges).sum()

        return f, params

    def global_attention_case(rng):
        block = AttentionBlock(8, 2, 2, 8, 1, 2, 8, rng)
        x = tensor(rng.standard_normal((5, 8)), requires_grad=True)
        coords = tensor(rng.standard_normal((5, 2)))
        w = rng.standard_normal((5, 8))
        params = dict(block.named_parameters())
        params["input"] = x
        return (lambda: _weighted(block(x, coords), w)), params

    def fusion_case(rng):
        block = HgtBlock(8, 2, 2, 8, 1, 2, rng, use_fusion=True, fusion_ffn_hidden=16)
        g = build_knn_graph(PointCloud(rng.random((6, 2))), 2)
        v = tensor(rng.standard_normal((6, 8)), requires_grad=True)
        e = tensor(rng.standard_normal((g.n_edges, 8)), requires_grad=True)
        c = tensor(rng.standard_normal((6, 2)))
        w = rng.standard_normal((6, 8))
        params = dict(block.named_parameters())
        params.update({"nodes": v, "edges": e})

        def f():
            out, _ = block(v, e, g.senders, g.receivers, 6, c)
            return _weighted(out, w)

        return f, params

    def cross_attention_case(rng):
        block = AttentionBlock(8, 2, 2, 8, 1, 2, 8, rng, cross=True)
        x = tensor(rng.standard_normal((4, 8)), requires_grad=True)
        ctx1 = tensor(rng.standard_normal((6, 8)), requires_grad=True)
        ctx2 = tensor(rng.standard_normal((3, 8)), requires_grad=True)
        coords = tensor(rng.standard_normal((4, 2)))
        w = rng.standard_normal((4, 8))
        params = dict(block.named_parameters())
        params.update({"queries": x, "context_a": ctx1, "context_b": ctx2})
        return (lambda: _weighted(block(x, coords, context=[ctx1, ctx2]), w)), params

    def multi_kv_case(rng):
        attn = MultiheadLinearAttention(8, 2, rng)
        x = tensor(rng.standard_normal((4, 8)), requires_grad=True)
        ctx = [tensor(rng.standard_normal((5, 8)), requires_grad=True),
               tensor(rng.standard_normal((7, 8)), requires_grad=True)]
        w = rng.standard_normal((4, 8))
        params = dict(attn.named_parameters())
        params.update({"x": x, "kv_a": ctx[0], "kv_b": ctx[1]})
        return (lambda: _weighted(attn(x, ctx), w)), params

    def moe_case(rng):
        moe = MoEFFN(8, 3, 8, 2, 2, 8, rng)
        x = tensor(rng.standard_normal((5, 8)), requires_grad=True)
        coords = tensor(rng.standard_normal((5, 2)), requires_grad=True)
        w = rng.standard_normal((5, 8))
        params = dict(moe.named_parameters())
        params.update({"x": x, "coords": coords})
        return (lambda: _weighted(moe(x, coords), w)), params

    def decoder_case(rng):
        from gito.tno import Decoder

        dec = Decoder(8, 8, 2, 1, rng)
        x = tensor(rng.standard_normal((5, 8)), requires_grad=True)
        w = rng.standard_normal((5, 2))
        params = dict(dec.named_parameters())
        params["input"] = x
        return (lambda: _weighted(dec(x), w)), params

    def end_to_end_case(rng):
        cfg = ModelConfig(
            hidden_size=8, n_heads=2, n_experts=2, n_attention_layers=1, n_hgt_blocks=1,
            mlp_layers=1, precision="float64", query_graph="knn:2", input_graph="knn:2",
            input_channels=(1,), output_field_count=1, fusion_ffn_mult=2,
        )
        model = build_model(cfg, seed=int(rng.integers(0, 2**31)))
        # undo the decoder's near-zero output init: upstream gradients would
        # otherwise sit at the finite-difference noise floor
        model.decoder.mlp.out.weight.data *= 100.0
        model.decoder.mlp.out.bias.data += rng.standard_normal(
            model.decoder.mlp.out.bias.shape
        )
        sample = _toy_sample(rng)
        target = Tensor(sample.targets)
        return (lambda: relative_l2_loss(model.forward(sample), target)), dict(model.named_parameters())

    cases = [
        ("encoder_mlp", encoder_case),
        ("gatv2", gat_case),
        ("global_attention", global_attention_case),
        ("fusion_block", fusion_case),
        ("cross_attention", cross_attention_case),
        ("multi_kv_attention", multi_kv_case),
        ("moe_ffn", moe_case),
        ("decoder", decoder_case),
        ("end_to_end", end_to_end_case),
    ]
    for name, builder in cases:
        for s in range(n_seeds):
            record(name, seed + 101 * s + 7, builder)
    return results
