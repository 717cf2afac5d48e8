"""Hybrid graph transformer block.

Each block runs two parallel paths over the node embeddings: a GATv2-style
message-passing layer that consumes edge embeddings, and a global linear
self-attention block.  Their outputs are concatenated and mixed by a fusion
self-attention block at twice the hidden width, then projected back.  The
ablation variant replaces fusion with an MLP on the elementwise sum.
"""

from __future__ import annotations

import numpy as np

from gito.autodiff import Tensor, concat, exp, gather, leaky_relu, scatter_add
from gito.layers import MLP, AttentionBlock, Linear, Module

__all__ = ["GatV2Layer", "HgtBlock", "segment_softmax"]

LEAKY_SLOPE = 0.2


def segment_softmax(logits, segments, n_segments):
    """Softmax of ``logits`` rows grouped by segment id (per receiver).

    Stabilized by subtracting each segment's running max; the shift is a
    constant and carries no gradient, exactly like the max-shift inside a
    plain softmax.
    """
    seg = np.asarray(segments, dtype=np.int64)
    shift = np.full((n_segments,) + logits.shape[1:], -np.inf, dtype=logits.dtype)
    np.maximum.at(shift, seg, logits.data)
    e = exp(logits - Tensor(shift[seg]))
    denom = scatter_add(e, seg, n_segments)
    return e / gather(denom, seg)


class GatV2Layer(Module):
    """GATv2 message passing with edge features and a residual edge update.

    Logits apply the attention vector after the LeakyReLU (dynamic
    attention); messages transform the sender embedding concatenated with
    the edge embedding; receivers aggregate softmax-weighted messages per
    head on top of a learned self-transform.
    """

    def __init__(self, hidden, n_heads, edge_hidden, edge_layers, rng, dtype=np.float64):
        super().__init__()
        if hidden % n_heads != 0:
            raise ValueError(f"hidden {hidden} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.w_att = Linear(3 * hidden, hidden, rng, dtype)
        self.att_vec = Tensor(
            (rng.uniform(-1, 1, size=hidden) * np.sqrt(3.0 / self.head_dim)).astype(dtype),
            requires_grad=True,
        )
        self.w_msg = Linear(2 * hidden, hidden, rng, dtype)
        self.w_self = Linear(hidden, hidden, rng, dtype)
        self.edge_mlp = MLP(3 * hidden, edge_hidden, hidden, edge_layers, rng, dtype)

    def forward(self, nodes, edges, senders, receivers, n_nodes):
        if len(senders) == 0:
            return self.w_self(nodes), edges
        m = len(senders)
        vi = gather(nodes, receivers)
        vj = gather(nodes, senders)
        z = concat([vi, vj, edges])
        act = leaky_relu(self.w_att(z), LEAKY_SLOPE)
        scores = (act * self.att_vec).reshape(m, self.n_heads, self.head_dim)
        logits = scores.sum(axis=-1)                     # (m, heads)
        alpha = segment_softmax(logits, receivers, n_nodes)
        msg = self.w_msg(concat([vj, edges])).reshape(m, self.n_heads, self.head_dim)
        weighted = (msg * alpha.reshape(m, self.n_heads, 1)).reshape(m, self.n_heads * self.head_dim)
        aggregated = scatter_add(weighted, receivers, n_nodes)
        node_out = self.w_self(nodes) + aggregated
        edge_out = edges + self.edge_mlp(z)
        return node_out, edge_out

    def attention_weights(self, nodes, edges, senders, receivers, n_nodes):
        """Per-edge, per-head attention coefficients (diagnostics/tests)."""
        m = len(senders)
        vi = gather(nodes, receivers)
        vj = gather(nodes, senders)
        z = concat([vi, vj, edges])
        act = leaky_relu(self.w_att(z), LEAKY_SLOPE)
        scores = (act * self.att_vec).reshape(m, self.n_heads, self.head_dim)
        return segment_softmax(scores.sum(axis=-1), receivers, n_nodes)


class HgtBlock(Module):
    """One hybrid block: GNN and global attention fused by self-attention.

    ``use_fusion=False`` builds the ablation variant, which sums the two
    paths and passes them through an MLP instead (the surrounding model is
    then built at doubled hidden size to match the fused dimensionality).
    The updated edge embeddings are returned for the next block.
    """

    def __init__(self, hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim,
                 rng, use_fusion=True, fusion_ffn_hidden=None, dtype=np.float64):
        super().__init__()
        self.use_fusion = use_fusion
        self.gnn = GatV2Layer(hidden, n_heads, 2 * mlp_hidden, mlp_layers, rng, dtype)
        self.global_attn = AttentionBlock(
            hidden, n_heads, n_experts, mlp_hidden, mlp_layers, coord_dim, mlp_hidden, rng, dtype=dtype
        )
        if use_fusion:
            if fusion_ffn_hidden is None:
                fusion_ffn_hidden = 7 * mlp_hidden
            self.fusion = AttentionBlock(
                2 * hidden, n_heads, n_experts, fusion_ffn_hidden, 2, coord_dim, mlp_hidden, rng, dtype=dtype
            )
            # combination stage starts near identity: the block refines the
            # node state gradually instead of swamping it at initialization
            self.proj = Linear(2 * hidden, hidden, rng, dtype, init_scale=0.1)
        else:
            self.sum_mlp = MLP(hidden, 2 * mlp_hidden, hidden, mlp_layers, rng, dtype, out_scale=0.1)

    def forward(self, nodes, edges, senders, receivers, n_nodes, coords):
        local, edges_out = self.gnn(nodes, edges, senders, receivers, n_nodes)
        global_out = self.global_attn(nodes, coords)
        # residual around the combination stage: stacked blocks refine the
        # node state instead of replacing it
        if self.use_fusion:
            fused = self.fusion(concat([local, global_out]), coords)
            return nodes + self.proj(fused), edges_out
        return nodes + self.sum_mlp(local + global_out), edges_out
