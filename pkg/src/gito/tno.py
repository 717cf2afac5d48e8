"""Transformer neural operator: cross-attention onto input-function
embeddings, self-attention among the enriched queries, and an MLP decoder.

Queries are free points: the same trained weights accept any number of
query rows and any number of rows per key/value source, which is what makes
zero-shot evaluation on denser meshes possible.
"""

from __future__ import annotations

import numpy as np

from gito.layers import MLP, AttentionBlock, Module, ModuleList

__all__ = ["TnoLayer", "TnoStack", "Decoder"]


class TnoLayer(Module):
    """One repetition of [multi-KV cross-attention -> self-attention]."""

    def __init__(self, hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim,
                 rng, self_attention=True, dtype=np.float64):
        super().__init__()
        self.cross = AttentionBlock(
            hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim, mlp_hidden,
            rng, cross=True, dtype=dtype,
        )
        self.self_attn = (
            AttentionBlock(hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim,
                           mlp_hidden, rng, dtype=dtype)
            if self_attention
            else None
        )

    def forward(self, queries, coords, sources):
        x = self.cross(queries, coords, context=sources)
        if self.self_attn is not None:
            x = self.self_attn(x, coords)
        return x


class TnoStack(Module):
    def __init__(self, depth, hidden, n_heads, n_experts, mlp_hidden, mlp_layers,
                 coord_dim, rng, self_attention=True, dtype=np.float64):
        super().__init__()
        self.layers = ModuleList(
            TnoLayer(hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim,
                     rng, self_attention, dtype)
            for _ in range(depth)
        )

    def forward(self, queries, coords, sources):
        if not sources:
            raise ValueError("TNO needs at least one input-function embedding")
        x = queries
        for layer in self.layers:
            x = layer(x, coords, sources)
        return x


class Decoder(Module):
    """Pointwise MLP from query embeddings to physical output channels.

    The final layer starts near zero so a freshly built model predicts
    (almost) the zero field, which anchors the untrained relative-L2 score
    at the zero-prediction baseline.
    """

    def __init__(self, hidden, mlp_hidden, n_out, mlp_layers, rng, dtype=np.float64):
        super().__init__()
        self.mlp = MLP(hidden, mlp_hidden, n_out, mlp_layers, rng, dtype, out_scale=0.01)

    def forward(self, x):
        return self.mlp(x)
