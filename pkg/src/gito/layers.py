"""Trainable layers: linear attention, residual attention blocks, MoE.

The attention here is the normalized linear-complexity kind: queries and
keys are softmax-normalized along the feature axis and combined through
feature-space outer products, so no (n_q x n_k) weight matrix is ever
materialized.  Blocks follow a pre-norm "Norm-Attn-MLP-Norm" residual
layout, and the MLP of every block is a mixture of experts gated on the
spatial coordinates of the rows it transforms.
"""

from __future__ import annotations

import numpy as np

from gito import autodiff as ad
from gito.autodiff import Tensor, clamp_min, concat, gelu, matmul, slice_cols, softmax

__all__ = [
    "Module",
    "ModuleList",
    "Linear",
    "MLP",
    "LayerNorm",
    "linear_attention",
    "MultiheadLinearAttention",
    "MoEFFN",
    "AttentionBlock",
]

DENOM_FLOOR = 1e-12


class Module:
    """Parameter container with named, recursively collected tensors."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.float64

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def xavier_uniform(rng, fan_in, fan_out, dtype, scale=1.0):
    limit = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float64, init_scale=1.0):
        super().__init__()
        self.weight = Tensor(xavier_uniform(rng, n_in, n_out, dtype, init_scale), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return matmul(x, self.weight) + self.bias


class MLP(Module):
    """GELU MLP: in -> hidden x n_layers -> out, linear final layer."""

    def __init__(self, n_in, n_hidden, n_out, n_layers, rng, dtype=np.float64, out_scale=1.0):
        super().__init__()
        if n_layers < 1:
            raise ValueError(f"MLP needs at least one hidden layer, got {n_layers}")
        widths = [n_in] + [n_hidden] * n_layers
        self.layers = ModuleList(
            Linear(widths[i], widths[i + 1], rng, dtype) for i in range(n_layers)
        )
        self.out = Linear(n_hidden, n_out, rng, dtype, init_scale=out_scale)

    def forward(self, x):
        for layer in self.layers:
            x = gelu(layer(x))
        return self.out(x)


class LayerNorm(Module):
    def __init__(self, width, dtype=np.float64, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ad.layer_norm(x, eps=self.eps) * self.gamma + self.beta


def linear_attention(q, k, v):
    """Normalized linear attention for one head.

    output_i = (q~_i . sum_j k~_j v_j^T) / (q~_i . sum_j k~_j) with q~, k~
    the per-row feature-axis softmax of Q and K.  Cost is O((n_q + n_k) h^2);
    the denominator is floored at 1e-12 against single-precision underflow
    (softmax keeps it mathematically positive, so the floor is inert in
    double precision and the single-key case returns V exactly).
    """
    if k.shape[0] == 0:
        raise ad.ShapeError("linear_attention needs at least one key row")
    qn = softmax(q, axis=-1)
    kn = softmax(k, axis=-1)
    context = matmul(kn.T, v)                     # (h, h)
    key_mass = kn.sum(axis=0, keepdims=True)      # (1, h)
    numer = matmul(qn, context)                   # (n_q, h)
    denom = clamp_min(matmul(qn, key_mass.T), DENOM_FLOOR)  # (n_q, 1)
    return numer / denom


class MultiheadLinearAttention(Module):
    """Multi-head projections around per-head linear attention.

    Accepts a list of key/value sources; per-head outputs are averaged
    across the list before the merge/output projection, so a single source
    reduces exactly to plain cross- or self-attention.
    """

    def __init__(self, width, n_heads, rng, dtype=np.float64):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.wq = Linear(width, width, rng, dtype)
        self.wk = Linear(width, width, rng, dtype)
        self.wv = Linear(width, width, rng, dtype)
        self.wo = Linear(width, width, rng, dtype)

    def forward(self, x, sources):
        if not sources:
            raise ValueError("attention needs at least one key/value source")
        q = self.wq(x)
        hd = self.head_dim
        merged = None
        for src in sources:
            k = self.wk(src)
            v = self.wv(src)
            heads = []
            for h in range(self.n_heads):
                lo, hi = h * hd, (h + 1) * hd
                heads.append(
                    linear_attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi))
                )
            out = concat(heads)
            merged = out if merged is None else merged + out
        if len(sources) > 1:
            merged = merged * (1.0 / len(sources))
        return self.wo(merged)


class MoEFFN(Module):
    """Mixture-of-experts feed-forward, gated on spatial coordinates.

    Every row's output is the gate-weighted convex combination of all
    expert MLPs evaluated at that row; gate weights are a softmax over a
    small MLP of the row's coordinates (soft domain decomposition).
    """

    def __init__(self, width, n_experts, expert_hidden, expert_layers, coord_dim, gate_hidden, rng, dtype=np.float64):
        super().__init__()
        self.n_experts = n_experts
        self.experts = ModuleList(
            MLP(width, expert_hidden, width, expert_layers, rng, dtype) for _ in range(n_experts)
        )
        self.gate_in = Linear(coord_dim, gate_hidden, rng, dtype)
        self.gate_out = Linear(gate_hidden, n_experts, rng, dtype)

    def gate_weights(self, coords):
        return softmax(self.gate_out(gelu(self.gate_in(coords))), axis=-1)

    def forward(self, x, coords):
        weights = self.gate_weights(coords)
        out = None
        for e, expert in enumerate(self.experts):
            term = expert(x) * slice_cols(weights, e, e + 1)
            out = term if out is None else out + term
        return out


class AttentionBlock(Module):
    """Pre-norm residual attention block: x + Attn(LN(x), ctx) + MoE(LN(.)).

    Self-attention when no context is given; cross-attention (possibly over
    several key/value sets) when a context list is supplied.
    """

    def __init__(self, width, n_heads, n_experts, expert_hidden, expert_layers,
                 coord_dim, gate_hidden, rng, cross=False, dtype=np.float64):
        super().__init__()
        self.norm_x = LayerNorm(width, dtype)
        self.norm_ctx = LayerNorm(width, dtype) if cross else None
        self.attn = MultiheadLinearAttention(width, n_heads, rng, dtype)
        self.norm_mid = LayerNorm(width, dtype)
        self.moe = MoEFFN(width, n_experts, expert_hidden, expert_layers, coord_dim, gate_hidden, rng, dtype)

    def forward(self, x, coords, context=None):
        nx = self.norm_x(x)
        if context is None:
            sources = [nx]
        else:
            if not context:
                raise ValueError("cross-attention needs a non-empty context list")
            sources = [self.norm_ctx(c) for c in context]
        h = x + self.attn(nx, sources)
        return h + self.moe(self.norm_mid(h), coords)
